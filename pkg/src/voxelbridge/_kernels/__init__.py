"""Kernel engine selection.

The volumetric hot loops (trilinear resampling, patch gather/scatter) exist
twice: a compiled Cython core and a numpy fallback with identical numerics.
`VOXELBRIDGE_KERNELS` picks the engine at import: ``auto`` (default, compiled
if available), ``ext`` (require compiled), ``py`` (force fallback).
"""

import os

from ..errors import CapabilityError
from . import _py

_requested = os.environ.get("VOXELBRIDGE_KERNELS", "auto").lower()

if _requested == "py":
    _impl = _py
elif _requested in ("auto", "ext"):
    try:
        from . import _ext as _impl  # type: ignore[no-redef]
    except ImportError as exc:
        if _requested == "ext":
            raise CapabilityError(
                "compiled kernel core requested (VOXELBRIDGE_KERNELS=ext) but "
                "voxelbridge._kernels._ext is not built"
            ) from exc
        _impl = _py
else:
    raise CapabilityError(f"unknown kernel engine {_requested!r} (use auto|ext|py)")

ENGINE = "py" if _impl is _py else "ext"

resize_trilinear = _impl.resize_trilinear
gather_patches = _impl.gather_patches
scatter_patches = _impl.scatter_patches


def engines():
    """Return the available kernel engines for benchmarking."""
    out = {"py": _py}
    try:
        from . import _ext

        out["ext"] = _ext
    except ImportError:
        pass
    return out
