"""Input checks shared by the estimators and functional entry points."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array

from .core import DimensionMismatchError, EmbeddingMatrix


def as_matrix(x, name: str = "X") -> np.ndarray:
    """Return ``x`` as a finite, C-ordered float64 2-D array.

    Accepts :class:`EmbeddingMatrix` or anything array-like.
    """
    if isinstance(x, EmbeddingMatrix):
        return x.data
    return check_array(x, dtype=np.float64, order="C", input_name=name)


def as_vector(x, dim: int | None = None, name: str = "u") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).ravel()
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite values")
    if dim is not None and len(v) != dim:
        raise DimensionMismatchError(f"{name} has length {len(v)}, expected {dim}")
    return v


def check_ids(ids, n: int, name: str = "item_ids") -> np.ndarray:
    a = np.asarray(ids, dtype=np.int64).ravel()
    if len(a) and (a.min() < 0 or a.max() >= n):
        raise IndexError(f"{name} out of range [0, {n})")
    return a


def check_count(value, name: str, minimum: int = 0) -> int:
    if not isinstance(value, numbers.Integral) or isinstance(value, bool):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_fraction(value, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value
