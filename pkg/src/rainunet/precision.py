"""Scalar precision selection.

Training runs in 32-bit floats. Finite-difference gradient verification is
unreliable at 32 bits, so a 64-bit "wide" mode is selectable at runtime.
The setting is thread-local: each logical training/evaluation thread owns
its own mode and tensors created on it.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

STANDARD = "standard"
WIDE = "wide"

_DTYPES = {STANDARD: np.float32, WIDE: np.float64}

_local = threading.local()


def get_precision() -> str:
    return getattr(_local, "mode", STANDARD)


def set_precision(mode: str) -> None:
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision {mode!r}, expected 'standard' or 'wide'")
    _local.mode = mode


def dtype() -> np.dtype:
    """Working float dtype for newly created tensors."""
    return np.dtype(_DTYPES[get_precision()])


@contextmanager
def use_precision(mode: str):
    previous = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)
