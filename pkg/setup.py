"""Builds the optional compiled kernel extension.

The package works without it (a numpy fallback is selected at import time);
when Cython and a C compiler are available the fused quantization kernels
are compiled for speed.  `-ffp-contract=off` keeps the compiled kernels
bit-identical to the numpy path (no FMA contraction).
"""

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "adfq._kernels_cy",
                ["src/adfq/_kernels_cy.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
