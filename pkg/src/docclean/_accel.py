"""Numba availability and the backend switch.

Setting ``DOCCLEAN_DISABLE_NUMBA=1`` forces the pure-numpy kernels even when
numba is importable.
"""
import os

DISABLE_ENV = "DOCCLEAN_DISABLE_NUMBA"

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

HAVE_NUMBA = numba is not None
if HAVE_NUMBA and "NUMBA_THREADING_LAYER" not in os.environ:
    # the default probe warns about the system TBB; workqueue is always present
    numba.config.THREADING_LAYER = "workqueue"
NUMBA_DISABLED = os.environ.get(DISABLE_ENV, "").strip().lower() not in ("", "0", "false", "no")


def default_backend():
    return "numba" if HAVE_NUMBA and not NUMBA_DISABLED else "numpy"


def set_threads(n):
    """Cap numba's worker threads. Results do not depend on the count."""
    if not HAVE_NUMBA or n is None:
        return
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
