"""Numba switch.

Set ``RSATE_DISABLE_NUMBA=1`` to run every kernel through its pure-numpy
implementation instead.  The flag is read once at import time.
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("RSATE_DISABLE_NUMBA", "").strip().lower()

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

USE_NUMBA: bool = _numba is not None and _FLAG not in {"1", "true", "yes", "on"}


def njit(*args, **kwargs):
    """``numba.njit`` when numba is active, identity decorator otherwise."""
    if _numba is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return _numba.njit(*args, **kwargs)
