"""Exception hierarchy. Every error carries a machine-parsable category that
the CLI prints as ``error category=<cat>`` before exiting nonzero."""


class VoxelbridgeError(Exception):
    category = "internal"


class FormatError(VoxelbridgeError):
    """A file does not conform to its declared on-disk format."""

    category = "format"


class BadMagicError(FormatError):
    category = "format.magic"


class PayloadMismatchError(FormatError):
    category = "format.payload"


class ValidationError(VoxelbridgeError):
    """An invariant or precondition was violated."""

    category = "validation"


class NonFiniteError(ValidationError):
    category = "validation.nonfinite"


class CapabilityError(VoxelbridgeError):
    """A requested external adapter or operation is unavailable."""

    category = "capability"
