"""Build script for the optional compiled kernel extension.

The package works without the extension (a numpy fallback is selected at
import time); set AORTASEG_PURE=1 to skip compilation entirely.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("AORTASEG_PURE") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "aortaseg._kernels",
                    ["src/aortaseg/_kernels.pyx"],
                    extra_compile_args=["-O3", "-march=native", "-ffast-math", "-fopenmp"],
                    extra_link_args=["-fopenmp"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        print("Cython not available, building without compiled kernels")
        ext_modules = []

setup(ext_modules=ext_modules)
