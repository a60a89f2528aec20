"""Numba switch.

Set ``KGANT_DISABLE_NUMBA=1`` before import to force the pure-numpy kernels.
"""
import logging
import os

logger = logging.getLogger(__name__)

DISABLED = os.environ.get("KGANT_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False
    logger.warning("numba not importable, falling back to numpy kernels")

USE_NUMBA = HAVE_NUMBA and not DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise.

    Jitted functions are always built when numba is importable so the
    benchmark can compare both paths in one process; the dispatcher in
    :mod:`kgant.kernels` decides which one the engine calls.
    """
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)
