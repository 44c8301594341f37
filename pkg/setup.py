"""Build the optional compiled BN kernels.

The package works without them: ``gprebn.kernels`` falls back to the numpy
implementation when the extension is missing or fails to build.
"""
import os

from setuptools import setup


def gather_extensions():
    if os.environ.get("GPREBN_NO_EXT"):
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        return []
    from setuptools import Extension

    ext = Extension(
        "gprebn._ckernels",
        ["src/gprebn/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        # no -ffast-math: the kernels must keep IEEE semantics for the identity tests
        extra_compile_args=["-O3", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=gather_extensions())
