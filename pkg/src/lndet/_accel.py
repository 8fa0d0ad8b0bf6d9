"""Numba switch.

Hot kernels are compiled with numba when it is importable and the
``LNDET_DISABLE_NUMBA`` environment variable is unset (or ``0``). Otherwise
the pure-numpy implementations in :mod:`lndet.kernels` are used.
"""
import os

_flag = os.environ.get("LNDET_DISABLE_NUMBA", "0").strip().lower()
_disabled = _flag not in ("", "0", "false", "no")

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not _disabled


def njit(func):
    """``numba.njit(cache=True)`` if numba is installed, else identity."""
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)
