"""Numba switch for the hot metric kernels.

Set ``DAPSAM_DISABLE_NUMBA=1`` to force the pure-numpy fallbacks. The flag is
read once at import time.
"""
import os

_FALSY = {"", "0", "false", "no", "off"}

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dep, but stay importable
    numba = None

NUMBA_ENABLED = numba is not None and os.environ.get("DAPSAM_DISABLE_NUMBA", "0").strip().lower() in _FALSY


def njit(fn):
    """Compile ``fn`` with numba in nopython mode, or return it untouched."""
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)
