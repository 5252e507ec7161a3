import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "fitrank.kernels._ckernels",
        ["src/fitrank/kernels/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        # no FMA contraction: matmul_ordered must match the numpy twin bitwise
        extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
