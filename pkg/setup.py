"""Build script: compiles the optional Cython kernel extension.

The package installs and runs without the extension (a numpy fallback with
the same kernel API is selected at import time); building it just makes
training considerably faster.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "fluseq.kernels._cykernels",
                ["src/fluseq/kernels/_cykernels.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
