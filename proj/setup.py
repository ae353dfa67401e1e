"""Builds the _attnet extension from the C++ core sources.

Kept deliberately dumb: every core translation unit is compiled into the
module, so the pip path needs no CMake and no prebuilt static library.
"""

import glob
import os

from pybind11.setup_helpers import Pybind11Extension, build_ext
from setuptools import setup

EIGEN_CANDIDATES = ["/usr/include/eigen3", "/usr/local/include/eigen3"]
eigen = next((p for p in EIGEN_CANDIDATES if os.path.isdir(p)), None)
if eigen is None:
    raise RuntimeError("Eigen3 headers not found; install libeigen3-dev")

ext = Pybind11Extension(
    "attnet._attnet",
    sources=sorted(glob.glob("src/*.cpp")) + ["python/bindings.cpp"],
    include_dirs=["include", "vendor", eigen],
    cxx_std=20,
    extra_compile_args=["-O2"],
)

setup(ext_modules=[ext], cmdclass={"build_ext": build_ext})
