import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    if not os.path.exists("src/lidarmesh/_kernels/_native.pyx"):
        raise ImportError("no extension sources")
    ext_modules = cythonize(
        [
            Extension(
                "lidarmesh._kernels._native",
                ["src/lidarmesh/_kernels/_native.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": 3},
    )
except ImportError:
    # Without Cython the package still installs; the pure-numpy kernels
    # are selected at import time.
    ext_modules = []

setup(ext_modules=ext_modules)
