"""Build script for the compiled ADMM kernel.

The extension is optional at runtime: emgrid falls back to the pure-Python
kernel if the compiled module is missing (see emgrid._qp_backend).
"""

import numpy as np
from setuptools import Extension, setup
from Cython.Build import cythonize

extensions = [
    Extension(
        "emgrid._admm_cy",
        sources=["src/emgrid/_admm_cy.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    ),
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "language_level": "3",
        },
    ),
)
