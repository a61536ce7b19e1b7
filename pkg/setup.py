import os

import numpy
from setuptools import Extension, setup

extensions = []
if os.environ.get("SPARSETRACK_NO_EXT", "") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        extensions = cythonize(
            [
                Extension(
                    "sparsetrack.kernels._ckernels",
                    ["src/sparsetrack/kernels/_ckernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=extensions)
