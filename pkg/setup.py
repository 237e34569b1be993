import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# The compiled core is optional: the package falls back to the numpy backend
# if the extension is missing.  Set APEXRACER_SKIP_EXT=1 to skip building it.
if os.environ.get("APEXRACER_SKIP_EXT") == "1":
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "apexracer._kernels._fastcore",
                sources=[
                    "src/apexracer/_kernels/_fastcore.pyx",
                    "src/apexracer/_kernels/core_impl.c",
                ],
                include_dirs=[np.get_include(), "src/apexracer/_kernels"],
                extra_compile_args=[
                    "-O3",
                    "-march=native",
                    "-ffast-math",
                    "-fopenmp",
                ],
                extra_link_args=["-fopenmp", "-lmvec", "-lm"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
