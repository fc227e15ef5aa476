"""Build the optional Cython kernels.

The extension is optional: when Cython or a C compiler is unavailable the
package installs without it and falls back to the numpy kernels at import.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("GRAPE_NO_EXT"):
    try:
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:  # pragma: no cover
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "grape._kernels",
                    ["src/grape/_kernels.pyx"],
                    # no -ffast-math: it would fold away the compensated sums
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )

setup(ext_modules=ext_modules)
