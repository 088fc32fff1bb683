"""Backend selection for the compiled kernels.

Hot loops (im2col/col2im, Sauvola thresholding, ranked average precision)
ship in two flavours: a numba ``@njit`` kernel and a pure-numpy fallback.
Set ``FRAGMIX_NO_NUMBA=1`` to force the numpy path, e.g. for debugging or
on platforms without numba.
"""

from __future__ import annotations

import os

_FALSY = {"", "0", "false", "no", "off"}


def _numba_disabled() -> bool:
    return os.environ.get("FRAGMIX_NO_NUMBA", "").strip().lower() not in _FALSY


try:
    if _numba_disabled():
        raise ImportError("numba disabled by FRAGMIX_NO_NUMBA")
    import numba as _numba

    HAVE_NUMBA = True
except ImportError:
    _numba = None
    HAVE_NUMBA = False

# no fastmath: kernels must agree bit-for-bit with their numpy twins
NJIT_OPTS = dict(cache=True, nogil=True, fastmath=False)


def njit(fn):
    """Compile ``fn`` with numba when available, otherwise return it unchanged."""
    if HAVE_NUMBA:
        return _numba.njit(**NJIT_OPTS)(fn)
    return fn


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


def pick(numba_impl, numpy_impl):
    """Return the implementation matching the active backend."""
    return numba_impl if HAVE_NUMBA else numpy_impl


def set_num_threads(n: int | None) -> None:
    """Cap the BLAS thread pool at ``n`` threads (None leaves it alone).

    The numba kernels are serial, so BLAS is the only pool to limit.
    """
    if n is None:
        return
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl ships with most numpy stacks
        return
    threadpool_limits(limits=n)
