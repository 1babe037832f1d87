"""Small input-validation helpers shared by the estimators and metrics."""

from __future__ import annotations

import numpy as np

from .exceptions import ContractError


def check_paired(a, b, what: str = "inputs") -> int:
    """Length of two non-empty, equally long sequences; raises otherwise."""
    n, m = len(a), len(b)
    if n == 0 or n != m:
        raise ContractError(f"{what} must be non-empty and of equal length (got {n} and {m})")
    return n


def as_float_vector(x, name: str = "array") -> np.ndarray:
    """Flatten ``x`` into a finite float64 vector."""
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite values")
    return arr


def check_unit_interval(value: float, name: str) -> float:
    """``value`` if it lies strictly inside (0, 1)."""
    if not 0.0 < value < 1.0:
        raise ContractError(f"{name} must lie in (0, 1), got {value}")
    return float(value)
