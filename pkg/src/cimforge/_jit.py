"""Numba switch.

Set ``CIMFORGE_DISABLE_JIT=1`` to run every kernel through its numpy path
(useful for debugging and on platforms without numba).
"""
import os

JIT_ENABLED = os.environ.get("CIMFORGE_DISABLE_JIT", "0").lower() not in ("1", "true", "yes")

try:
    from numba import njit as _numba_njit
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    _numba_njit = None
    JIT_ENABLED = False


def njit(func=None, **kwargs):
    """``numba.njit`` when available, otherwise the identity decorator."""
    if _numba_njit is None:
        if func is not None:
            return func
        return lambda f: f
    kwargs.setdefault("cache", True)
    if func is not None:
        return _numba_njit(**kwargs)(func)
    return _numba_njit(**kwargs)
