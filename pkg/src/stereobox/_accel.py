"""Optional numba acceleration.

Kernels in :mod:`stereobox._kernels` are written in the numba-compatible
subset of Python/NumPy and decorated with :func:`njit` from this module.
Set ``SC_NUMBA=0`` before import to run them as plain Python; the original
function is always reachable through ``kernel.py_func``.
"""
from __future__ import annotations

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _env_enabled() -> bool:
    return os.environ.get("SC_NUMBA", "1").strip().lower() not in ("0", "false", "off", "no")


NUMBA_ENABLED = numba is not None and _env_enabled()


def njit(fn=None, **options):
    options.setdefault("cache", True)

    def wrap(f):
        if NUMBA_ENABLED:
            return numba.njit(**options)(f)
        f.py_func = f
        return f

    return wrap(fn) if fn is not None else wrap
