"""Small input-validation helpers used by the public constructors and the estimator."""

from __future__ import annotations

import numpy as np

from .exceptions import DataValidationError


def as_float_matrix(value, name: str, *, allow_1d: bool = False) -> np.ndarray:
    """Coerce ``value`` to a read-only 2-d float64 array.

    Parameters
    ----------
    value : array-like
        Input to coerce.
    name : str
        Name used in error messages.
    allow_1d : bool
        If True, a 1-d input is promoted to a single column.
    """
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 1 and allow_1d:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DataValidationError(f"{name} must be a 2-d array, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise DataValidationError(
            f"{name} contains a non-finite entry at row {bad[0]}, column {bad[1]}"
        )
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


def as_float_vector(value, name: str, *, length: int | None = None) -> np.ndarray:
    """Coerce ``value`` to a read-only 1-d float64 array of optional fixed length."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 1:
        raise DataValidationError(f"{name} must be a 1-d array, got ndim={arr.ndim}")
    if length is not None and arr.shape[0] != length:
        raise DataValidationError(
            f"{name} must have length {length}, got {arr.shape[0]}"
        )
    if not np.all(np.isfinite(arr)):
        raise DataValidationError(f"{name} contains non-finite entries")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


def as_state_vector(value, name: str) -> np.ndarray:
    """Coerce to a 1-d integer array with entries in {0, 1}."""
    arr = np.asarray(value)
    if arr.ndim != 1:
        raise DataValidationError(f"{name} must be a 1-d array, got ndim={arr.ndim}")
    arr = arr.astype(np.int64, copy=True)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise DataValidationError(f"{name} must contain only states 0 and 1")
    arr.setflags(write=False)
    return arr
