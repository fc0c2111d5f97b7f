"""Build script: compiles the optional MAC kernel extension.

The package is fully functional without the extension (a numpy fallback is
selected at import time); the compiled kernel exists to make layer-level
MAC simulation fast enough for training runs.
"""
import os

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    extra = ["-O3"]
    if os.environ.get("PIMTRAIN_NATIVE", "1") == "1":
        extra.append("-march=native")
    ext_modules = cythonize(
        [
            Extension(
                "pimtrain._kernels._mackern",
                ["src/pimtrain/_kernels/_mackern.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=extra + ["-fopenmp"],
                extra_link_args=["-fopenmp"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    # No Cython available: install pure-python only.
    ext_modules = []

setup(ext_modules=ext_modules)
