"""Kernel backend selection.

Two interchangeable implementations of the LSTM hot kernels exist: a
compiled Cython extension (``fluseq.kernels._cykernels``) and a pure numpy
fallback (``fluseq.kernels.npkernels``).  The compiled one is picked at
import when present; set ``FLUSEQ_KERNELS=numpy`` or ``=cython`` to force a
choice, or call :func:`set_backend` from code (the benchmark and the parity
tests do).

Numerical note: the two backends agree to float64 rounding but are not
bit-identical to each other (different summation order), so reproducibility
guarantees hold per backend.
"""

import os

from fluseq.errors import ConfigError
from fluseq.kernels import npkernels

_backend = None


def _resolve(choice):
    if choice == "numpy":
        return npkernels
    if choice == "cython":
        from fluseq.kernels import _cykernels

        return _cykernels
    raise ConfigError(f"unknown kernel backend {choice!r}; use 'cython' or 'numpy'")


def set_backend(choice):
    """Force the kernel backend for the rest of the process."""
    global _backend
    _backend = _resolve(choice)
    return _backend


def backend():
    """Return the active kernel module, selecting a default on first use."""
    global _backend
    if _backend is None:
        choice = os.environ.get("FLUSEQ_KERNELS")
        if choice:
            _backend = _resolve(choice)
        else:
            try:
                _backend = _resolve("cython")
            except ImportError:
                _backend = npkernels
    return _backend


def backend_name():
    return backend().name
