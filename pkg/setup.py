import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# The kernel relies on auto-vectorization; tune for the build machine unless a
# portable binary is requested.
flags = ["-O3"] if os.environ.get("BLOCKPUNCH_PORTABLE") else ["-O3", "-march=native"]

extensions = [
    Extension(
        "blockpunch.runtime._kernels",
        ["src/blockpunch/runtime/_kernels.pyx"],
        include_dirs=[np.get_include(), "src/blockpunch/runtime"],
        extra_compile_args=flags,
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
