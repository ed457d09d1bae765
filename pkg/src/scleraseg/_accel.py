"""Backend switch for the hot array kernels.

Kernels are compiled with numba when it is importable and the environment
variable ``SCLERASEG_DISABLE_NUMBA`` is unset (or ``0``). Otherwise the
vectorized numpy implementations in :mod:`scleraseg.kernels` are used.
"""
from __future__ import annotations

import os

_FLAG = "SCLERASEG_DISABLE_NUMBA"

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None


def numba_requested() -> bool:
    return os.environ.get(_FLAG, "0").strip().lower() in ("", "0", "false", "no")


USE_NUMBA = _numba is not None and numba_requested()


def njit(*args, **kwargs):
    """``numba.njit`` with caching on, or a no-op when numba is unavailable."""
    kwargs.setdefault("cache", True)
    if _numba is None:
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    return _numba.njit(*args, **kwargs)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
