"""Backend switch for the hot kernels.

Set ``GROWTAS_BACKEND=numpy`` to force the pure-numpy path. The default is
``numba`` when it can be imported, otherwise numpy.
"""
import os

BACKEND = os.environ.get("GROWTAS_BACKEND", "numba").strip().lower()
if BACKEND not in ("numba", "numpy"):
    raise ImportError(f"GROWTAS_BACKEND must be 'numba' or 'numpy', got {BACKEND!r}")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and BACKEND == "numba"


def njit(fn):
    """Compile ``fn`` with numba if available; strict IEEE semantics (no fastmath)."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, fastmath=False, error_model="numpy")(fn)


def pick(jitted, fallback):
    return jitted if USE_NUMBA else fallback
