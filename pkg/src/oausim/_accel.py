"""Optional numba acceleration.

Hot kernels are written twice: a numba ``@njit`` loop and a vectorised numpy
equivalent. Set ``OAUSIM_DISABLE_NUMBA=1`` to force the numpy path (also used
automatically when numba cannot be imported).
"""

import functools
import os

_DISABLED = os.environ.get("OAUSIM_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    import numba as _nb
except ImportError:  # pragma: no cover - numba is optional
    _nb = None

NUMBA_AVAILABLE = _nb is not None
USE_NUMBA = NUMBA_AVAILABLE and not _DISABLED


def njit(func=None, **kwargs):
    """``numba.njit(cache=True, nogil=True)`` or a no-op when numba is missing."""
    opts = dict(cache=True, nogil=True)
    opts.update(kwargs)
    if func is None:
        return functools.partial(njit, **opts)
    if not NUMBA_AVAILABLE:
        return func
    return _nb.njit(**opts)(func)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
