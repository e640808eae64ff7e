"""Build script for the optional compiled kernels.

The package runs without the extension: ``dcdm.kernels`` falls back to the
numpy implementations when ``dcdm._ckernels`` cannot be imported.
"""
from setuptools import setup

try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension
except ImportError:  # build without the extension
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "dcdm._ckernels",
                ["src/dcdm/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
