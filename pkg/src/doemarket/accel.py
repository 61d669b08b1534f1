"""Optional numba acceleration with a pure-numpy fallback.

The hot numeric kernels (the dense interior-point iteration in
``doemarket._ipm``) are written as plain numpy functions and compiled with
``numba.njit`` when acceleration is enabled.  Set ``DOEMARKET_NUMBA=0`` in the
environment (before import) to force the pure-numpy path; anything else, or an
unavailable numba install, is handled automatically.  The selected path is
fixed at import time so a given process is always internally consistent.
"""

import os

_FALSE = {"0", "false", "off", "no"}


def numba_requested() -> bool:
    """True unless the environment explicitly disables acceleration."""
    return os.environ.get("DOEMARKET_NUMBA", "1").strip().lower() not in _FALSE


try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised via env flag instead
    numba = None
    NUMBA_AVAILABLE = False

NUMBA_ENABLED = NUMBA_AVAILABLE and numba_requested()


def maybe_njit(func):
    """Compile ``func`` with numba when enabled, else return it unchanged.

    The undecorated function must be valid nopython-mode numba code; it is the
    fallback path and stays importable without numba.
    """
    if NUMBA_ENABLED:
        return numba.njit(cache=True)(func)
    return func
