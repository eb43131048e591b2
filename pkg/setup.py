import os

import numpy as np
from setuptools import Extension, setup

# Pure-Python fallback is used when the extension is absent, so a failed
# compile must not break installation.
try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

compile_args = ["-O3"]
if os.environ.get("GATED_RES2NET_NATIVE", "1") == "1":
    compile_args.append("-march=native")

ext_modules = []
if cythonize is not None and os.environ.get("GATED_RES2NET_NO_EXT") != "1":
    ext_modules = cythonize(
        [
            Extension(
                "gated_res2net._conv_ext",
                ["src/gated_res2net/_conv_ext.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=compile_args,
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )

setup(ext_modules=ext_modules)
