"""Small input-checking helpers shared by the estimators and operations."""

from __future__ import annotations

import math
import numbers

import numpy as np


def check_positive(value, name: str, *, allow_zero: bool = False) -> float:
    if not isinstance(value, numbers.Real) or not math.isfinite(value):
        raise ValueError(f"{name} must be a finite number, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise ValueError(f"{name} must be {bound}, got {value!r}")
    return float(value)


def check_probability(value, name: str) -> float:
    value = check_positive(value, name, allow_zero=True)
    if value > 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value!r}")
    return value


def check_int(value, name: str, *, minimum: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value!r}")
    return int(value)


def check_ranges(ranges, max_range: float) -> np.ndarray:
    arr = np.asarray(ranges, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"ranges must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("ranges contain non-finite values")
    if arr.size and (arr.min() <= 0 or arr.max() > max_range):
        raise ValueError(f"ranges must lie in (0, {max_range}]")
    return arr


def check_increasing(edges, name: str = "edges") -> np.ndarray:
    arr = np.asarray(edges, dtype=float)
    if arr.ndim != 1 or arr.size < 2:
        raise ValueError(f"{name} needs at least two values")
    if np.any(np.diff(arr) <= 0):
        raise ValueError(f"{name} must be strictly increasing")
    return arr
