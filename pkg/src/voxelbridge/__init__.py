"""voxelbridge: desk-scale fMRI visual decoding pipeline.

Volumes in, language and images out: NVOL1 volume I/O plus a seeded synthetic
world, cubic patch preprocessing, a dual-aligned transformer extractor, a
multimodal token bridge to a small language model, latent-mix image
reconstruction, gradient-based concept localization, and an evaluation suite.
"""

import os as _os
import sys as _sys


def _cap_math_threads() -> None:
    # Honor VOXELBRIDGE_THREADS for BLAS pools. Only effective if numpy/torch
    # have not been imported yet, so do it at package import time.
    n = _os.environ.get("VOXELBRIDGE_THREADS")
    if not n:
        return
    if "numpy" not in _sys.modules:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            _os.environ.setdefault(var, n)


_cap_math_threads()

__version__ = "0.1.0"
