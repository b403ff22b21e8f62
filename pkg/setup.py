"""Build script: compiles the optional Cython kernel core.

The extension is a pure accelerator; if Cython or a C compiler is missing the
package installs anyway and falls back to the numpy kernels at import time.
Set VOXELBRIDGE_NO_EXT=1 to skip the extension build entirely.
"""

import os

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """Degrade to a pure-python install when the extension cannot compile."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing or broken toolchain
            print(f"WARNING: skipping voxelbridge._kernels._ext build: {exc}")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"WARNING: could not compile {ext.name}: {exc}")


def make_ext_modules():
    if os.environ.get("VOXELBRIDGE_NO_EXT") == "1":
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "voxelbridge._kernels._ext",
        ["src/voxelbridge/_kernels/_ext.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level=3)


setup(
    ext_modules=make_ext_modules(),
    cmdclass={"build_ext": optional_build_ext},
)
