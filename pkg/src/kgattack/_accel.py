"""Optional numba acceleration.

Kernels are written twice: an ``@njit`` loop version and a vectorised numpy
version. ``KGATTACK_DISABLE_NUMBA=1`` (or numba being absent) selects the
numpy path at import time.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

_FLAG = os.environ.get("KGATTACK_DISABLE_NUMBA", "").strip().lower()

NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and _FLAG not in ("1", "true", "yes", "on")


def njit(func=None, **kwargs):
    """``numba.njit`` with caching, or a no-op decorator when numba is missing."""
    if numba is None:
        def wrap(f):
            return f
    else:
        kwargs.setdefault("cache", True)

        def wrap(f):
            return numba.njit(**kwargs)(f)

    if func is not None:
        return wrap(func)
    return wrap


def pick(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
