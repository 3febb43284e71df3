"""Build script: compiles the native kernel extension when Cython is available.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile only costs performance, never a build.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("INSITU_NO_NATIVE") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "insitu._kernels._native",
                    sources=["src/insitu/_kernels/_native.pyx"],
                    include_dirs=[np.get_include()],
                    # fp-contract off keeps kernel arithmetic bit-identical
                    # to the numpy backend (no FMA re-rounding).
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
