from setuptools import Extension, setup
from Cython.Build import cythonize
import numpy as np

# Compiled kernels for the hot inner loops (3D convolution passes and the
# 26-direction non-maximum suppression). The package falls back to pure
# numpy implementations when the extension is unavailable, so a failed
# build is an inconvenience rather than a hard error for users; here we
# build it unconditionally.
ext = Extension(
    "edgeflow3d.backend._corecy",
    ["src/edgeflow3d/backend/_corecy.pyx"],
    include_dirs=[np.get_include()],
    extra_compile_args=["-O3"],
)

setup(
    ext_modules=cythonize([ext], compiler_directives={"language_level": "3"}),
)
