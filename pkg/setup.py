import os

import numpy as np
from setuptools import Extension, setup

# The compiled kernels are optional: if the extension fails to build, the
# package falls back to the pure-numpy implementations at import time.
extensions = []
if os.path.exists("src/aolearn/_kernels.pyx"):
    try:
        from Cython.Build import cythonize

        extensions = cythonize(
            [
                Extension(
                    "aolearn._kernels",
                    ["src/aolearn/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    optional=True,
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        pass

setup(ext_modules=extensions)
