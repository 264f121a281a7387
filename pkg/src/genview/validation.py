"""Input validation helpers.

All public entry points funnel array-likes through these checks so the
numerical kernels can assume finite float64 arrays of the right rank.
"""

from __future__ import annotations

import numpy as np

from .exceptions import DegenerateInputError, ShapeMismatchError


def check_vector(x, name: str = "vector") -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeMismatchError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise DegenerateInputError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise DegenerateInputError(f"{name} contains non-finite entries")
    return arr


def check_feature_map(f, name: str = "feature map") -> np.ndarray:
    """Coerce to a finite (H, W, K) float64 array."""
    arr = np.asarray(f, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeMismatchError(f"{name} must have shape (H, W, K), got {arr.shape}")
    if arr.size == 0:
        raise DegenerateInputError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise DegenerateInputError(f"{name} contains non-finite entries")
    return arr


def check_scalar_map(m, name: str = "scalar map") -> np.ndarray:
    """Coerce to a finite (H, W) float64 array."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{name} must have shape (H, W), got {arr.shape}")
    if arr.size == 0:
        raise DegenerateInputError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise DegenerateInputError(f"{name} contains non-finite entries")
    return arr


def check_same_dim(a: np.ndarray, b: np.ndarray, what: str = "vectors") -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what} have mismatched shapes {a.shape} vs {b.shape}")


def check_unit_interval(value: float, name: str) -> float:
    value = float(value)
    if not (0.0 <= value <= 1.0):
        raise ValueError(f"{name} must be in [0, 1], got {value}")
    return value
