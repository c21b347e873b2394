"""Input validation helpers shared across the package.

Small check functions in the spirit of sklearn's ``check_array``: validate,
coerce to a canonical dtype, and raise ``ValueError`` with a readable message.
"""

from __future__ import annotations

import numpy as np

__all__ = ["as_float_vector", "as_float_matrix", "check_finite", "check_positive", "check_range_pair"]


def as_float_vector(x, name: str = "array") -> np.ndarray:
    """Coerce to a 1-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def as_float_matrix(x, name: str = "array") -> np.ndarray:
    """Coerce to a 2-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_positive(value: float, name: str) -> float:
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def check_range_pair(pair, name: str) -> tuple[float, float]:
    lo, hi = pair
    if not lo <= hi:
        raise ValueError(f"{name} must satisfy lo <= hi, got ({lo}, {hi})")
    return float(lo), float(hi)
