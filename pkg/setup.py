"""Builds the optional compiled GRU kernels.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so any compiler/Cython failure downgrades to a
pure-Python install instead of aborting.
"""

import pathlib
import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext

PYX = pathlib.Path(__file__).parent / "src" / "mgshield" / "gru" / "_core.pyx"


class OptionalBuildExt(build_ext):
    """build_ext that warns instead of failing when the toolchain is missing."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001 - any build failure downgrades
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        print(
            f"warning: compiled kernels skipped ({exc}); "
            "mgshield will use the pure-Python GRU backend",
            file=sys.stderr,
        )


def extensions():
    if not PYX.exists():
        return []
    try:
        from Cython.Build import cythonize
    except ImportError:
        print("warning: Cython not available, building without compiled kernels",
              file=sys.stderr)
        return []
    return cythonize(
        [str(PYX.relative_to(pathlib.Path(__file__).parent))],
        language_level=3,
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )


setup(
    ext_modules=extensions(),
    cmdclass={"build_ext": OptionalBuildExt},
)
