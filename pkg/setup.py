import os

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; lacare.nn.backend uses numpy
    cythonize = None

# LACARE_CFLAGS overrides the default tuning, e.g. for portable wheels.
cflags = os.environ.get("LACARE_CFLAGS", "-O3 -march=native").split()

ext_modules = []
if cythonize is not None and os.environ.get("LACARE_NO_EXT") != "1":
    ext_modules = cythonize(
        [
            Extension(
                "lacare._ext._conv3d",
                ["src/lacare/_ext/_conv3d.pyx"],
                include_dirs=["src/lacare/_ext"],
                extra_compile_args=cflags,
                depends=[
                    "src/lacare/_ext/conv3d_kernels.h",
                    "src/lacare/_ext/conv3d_impl.h",
                ],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
