"""JIT switch for the hot kernels.

Kernels are written once in a numba-compatible subset and decorated with
:func:`kernel`.  Setting ``LOOPER_JIT=0`` in the environment (before import)
selects the pure numpy/Python fallback path everywhere.
"""
import os

JIT_ENABLED = os.environ.get("LOOPER_JIT", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    if not JIT_ENABLED:
        raise ImportError
    from numba import njit as _njit
except ImportError:  # pragma: no cover - exercised with LOOPER_JIT=0
    JIT_ENABLED = False
    _njit = None


def kernel(**opts):
    """Compile ``fn`` with ``numba.njit(**opts)`` when the JIT is enabled."""

    def decorator(fn):
        if _njit is None:
            return fn
        return _njit(**opts)(fn)

    return decorator


def backend_name():
    return "numba" if JIT_ENABLED else "numpy"
