"""Kernel backend selection.

The pairwise-similarity kernels exist twice: a numba @njit version (default)
and a vectorized pure-numpy fallback. Set ONTOCLR_DISABLE_NUMBA=1 to force
the numpy path; it is also taken automatically when numba cannot be imported.
The choice is made once at import time.
"""
from __future__ import annotations

import os

_FLAG = os.environ.get("ONTOCLR_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG in ("1", "true", "yes", "on")

if not _DISABLED:
    try:
        import numba  # noqa: F401
        _HAVE_NUMBA = True
    except ImportError:
        _HAVE_NUMBA = False
else:
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and not _DISABLED


def active_backend() -> str:
    """Name of the kernel backend selected at import time."""
    return "numba" if USE_NUMBA else "numpy"


def kernels():
    """The active kernel module (see _kernels_numba / _kernels_numpy).

    Both expose code_sim_many, pair_sim, and cohort_pair_sims with identical
    contracts; the numba module is imported lazily so the numpy path never
    pays jit startup.
    """
    if USE_NUMBA:
        from . import _kernels_numba
        return _kernels_numba
    from . import _kernels_numpy
    return _kernels_numpy
