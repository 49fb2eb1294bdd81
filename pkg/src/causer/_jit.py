"""Numba switch.

Hot kernels are written once and decorated with :func:`njit`. Setting
``CAUSER_DISABLE_JIT=1`` in the environment swaps every kernel for its
pure-numpy twin (see ``causer.kernels``), which is handy for debugging and
for machines without a working LLVM.
"""
import os

JIT_ENABLED = os.environ.get("CAUSER_DISABLE_JIT", "0").lower() not in ("1", "true", "yes")

if JIT_ENABLED:
    try:
        from numba import njit, prange
    except ImportError:  # pragma: no cover
        JIT_ENABLED = False

if not JIT_ENABLED:

    def njit(func=None, **kwargs):
        if func is not None:
            return func

        def wrapper(f):
            return f

        return wrapper

    prange = range
