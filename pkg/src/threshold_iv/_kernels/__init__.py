"""Kernel backend selection.

The compiled Cython backend is picked at import time when available; the
NumPy reference backend is the fallback. ``THRESHOLD_IV_BACKEND=python|c``
forces a choice, and ``use_backend``/``active_backend`` let tests and the
benchmark switch explicitly.
"""

from __future__ import annotations

import os
import warnings

from . import _ref
from ._prep import OK, SINGULAR, TOO_SMALL, PreparedSample, prepare

try:
    from . import _fast

    HAVE_FAST = True
except ImportError:  # pragma: no cover - build dependent
    _fast = None
    HAVE_FAST = False

_KERNEL_NAMES = (
    "gmm_fixed_resid_stats",
    "gmm_pergamma_stats",
    "gmm_pergamma_resid2",
    "tfs_rho_ssr",
    "tsls_sequences_lfs",
    "tsls_sequences_tfs",
)

_active = None


def _choose_default():
    forced = os.environ.get("THRESHOLD_IV_BACKEND", "").strip().lower()
    if forced in ("python", "ref", "numpy"):
        return _ref
    if forced in ("c", "fast", "cython"):
        if not HAVE_FAST:  # pragma: no cover - build dependent
            warnings.warn("THRESHOLD_IV_BACKEND=c requested but the extension is missing")
            return _ref
        return _fast
    return _fast if HAVE_FAST else _ref


def use_backend(name: str) -> None:
    """Switch the active backend ('c' or 'python'); mainly for tests/benchmarks."""
    global _active
    if name in ("python", "ref", "numpy"):
        _active = _ref
    elif name in ("c", "fast", "cython"):
        if not HAVE_FAST:
            raise RuntimeError("compiled backend is not available")
        _active = _fast
    else:
        raise ValueError(f"unknown backend {name!r}")


def active_backend() -> str:
    return "c" if _active is _fast else "python"


_active = _choose_default()


def __getattr__(name):
    if name in _KERNEL_NAMES:
        return getattr(_active, name)
    raise AttributeError(name)


__all__ = [
    "OK",
    "SINGULAR",
    "TOO_SMALL",
    "HAVE_FAST",
    "PreparedSample",
    "prepare",
    "use_backend",
    "active_backend",
    *_KERNEL_NAMES,
]
