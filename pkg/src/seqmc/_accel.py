"""Numba availability and the switch between compiled and pure-numpy kernels.

Set ``SEQMC_DISABLE_NUMBA=1`` in the environment before import to force the
numpy implementations even when numba is installed.
"""
import os

_disabled = os.environ.get("SEQMC_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(fn):
            return fn

        return wrap


USE_NUMBA = NUMBA_AVAILABLE and not _disabled


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
