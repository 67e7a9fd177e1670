"""Numba dispatch.

Kernels in :mod:`octomesh.kernels` come in two flavours: an ``@njit`` loop
kernel and a vectorised numpy fallback.  The fallback is used when numba is
missing or when ``HVO_DISABLE_NUMBA`` is set to a truthy value.
"""
from __future__ import annotations

import os

_FALSY = ("", "0", "false", "no", "off")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("HVO_DISABLE_NUMBA", "0").strip().lower() in _FALSY

if HAVE_NUMBA:
    _threads = os.environ.get("HVO_THREADS")
    if _threads:
        try:
            numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))
        except ValueError:
            pass


def njit(*args, **kwargs):
    """``numba.njit`` with ``cache=True``; identity decorator without numba."""
    kwargs.setdefault("cache", True)
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)
