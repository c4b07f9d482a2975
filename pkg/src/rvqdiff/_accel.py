"""Numba switch.

Set ``RVQDIFF_DISABLE_NUMBA=1`` before import to force the pure-numpy
kernels.  When numba is not installed the numpy path is used silently.
"""

import os

try:
    import numba

    HAS_NUMBA = True
except ImportError:
    numba = None
    HAS_NUMBA = False


def _numba_enabled(flag: str) -> bool:
    return HAS_NUMBA and flag.strip().lower() not in {"1", "true", "yes"}


USE_NUMBA = _numba_enabled(os.environ.get("RVQDIFF_DISABLE_NUMBA", ""))


def njit(*args, **kwargs):
    """``numba.njit`` when numba is in use, identity decorator otherwise."""
    if USE_NUMBA:
        return numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda f: f
