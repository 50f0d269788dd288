"""Build hook for the optional compiled conv kernels.

Without Cython or a C compiler the package installs pure-Python and
``windcast.tensor.kernels`` falls back to numpy at import time.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("WINDCAST_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "windcast.tensor._conv",
                    ["src/windcast/tensor/_conv.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
