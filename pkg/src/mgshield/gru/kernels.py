"""Sequence-kernel backend selection.

The compiled extension is preferred when it imported cleanly; the numpy
reference backend is always available. MGSHIELD_KERNELS=python|compiled
forces a choice (forcing "compiled" on an install without the extension is a
configuration error rather than a silent fallback).
"""

from __future__ import annotations

import os

from ..errors import ConfigError
from . import _kernels_py

BACKENDS = {"python": _kernels_py}
try:
    from . import _core
    BACKENDS["compiled"] = _core
except ImportError:
    pass


def _select() -> str:
    requested = os.environ.get("MGSHIELD_KERNELS", "").strip().lower()
    if not requested:
        return "compiled" if "compiled" in BACKENDS else "python"
    if requested not in ("python", "compiled"):
        raise ConfigError(
            f"MGSHIELD_KERNELS={requested!r}; expected 'python' or 'compiled'")
    if requested not in BACKENDS:
        raise ConfigError(
            "MGSHIELD_KERNELS=compiled but the compiled extension is not installed")
    return requested


BACKEND = _select()

sequence_forward = BACKENDS[BACKEND].sequence_forward
sequence_backward = BACKENDS[BACKEND].sequence_backward


def get_backend(name: str = None):
    """Module implementing the kernel contract; name=None gives the active one."""
    if name is None:
        name = BACKEND
    if name not in BACKENDS:
        raise ConfigError(f"kernel backend {name!r} not available "
                          f"(have: {sorted(BACKENDS)})")
    return BACKENDS[name]
