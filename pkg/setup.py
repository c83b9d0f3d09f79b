import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

if cythonize is not None:
    extensions = cythonize(
        [
            Extension(
                "caudr._ckernels",
                ["src/caudr/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                # FP contraction off keeps elementwise kernels bitwise
                # identical to the numpy fallback (no fused multiply-add)
                extra_compile_args=["-O3", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
else:
    # The package still works without the extension: caudr.backend falls
    # back to the numpy kernels at import time.
    extensions = []

setup(ext_modules=extensions)
