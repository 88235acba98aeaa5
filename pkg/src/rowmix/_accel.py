"""Numba switch.

Hot kernels are written once as plain Python loops and compiled with
``numba.njit`` unless ``ROWMIX_DISABLE_NUMBA=1`` is set (or numba is missing),
in which case callers route to the vectorised numpy implementations instead.
"""
import os

_DISABLED = os.environ.get("ROWMIX_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:
    _njit = None
    HAVE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, identity otherwise."""
    if HAVE_NUMBA:
        return _njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
