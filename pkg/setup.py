import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; kernels fall back to numpy
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("TIEREDRAG_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "tieredrag._kernels",
                ["src/tieredrag/_kernels.pyx"],
                include_dirs=[np.get_include()],
                # no -march=native / -ffast-math: results must match the numpy fallback bit for bit
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3", "boundscheck": False, "wraparound": False},
    )

setup(ext_modules=ext_modules)
