"""Input validation helpers shared by the estimators and functional API."""

import numpy as np

from .errors import DimensionError, ValidationError


def check_vector(x, length=None, name="x", dtype=np.float64):
    """Return ``x`` as a finite 1-D array, optionally of fixed length."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 1:
        raise DimensionError(name, f"1-D of length {length}", arr.shape)
    if length is not None and arr.shape[0] != length:
        raise DimensionError(name, length, arr.shape[0])
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_matrix(X, n_features=None, name="X"):
    """Return ``X`` as a finite 2-D float array; 1-D input is one sample."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[np.newaxis, :]
    if arr.ndim != 2:
        raise DimensionError(name, "2-D", arr.shape)
    if n_features is not None and arr.shape[1] != n_features:
        raise DimensionError(f"{name} features", n_features, arr.shape[1])
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_finite_scalar(value, name):
    value = float(value)
    if not np.isfinite(value):
        raise ValidationError(f"{name} must be finite, got {value}")
    return value


def check_unit_interval(value, name):
    value = check_finite_scalar(value, name)
    if not 0.0 <= value <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_same_shape(arrays, names):
    shapes = [np.shape(a) for a in arrays]
    if any(s != shapes[0] for s in shapes[1:]):
        listing = ", ".join(f"{n}={s}" for n, s in zip(names, shapes))
        raise DimensionError("shape", "identical shapes", listing)


def readonly(arr):
    """Return a C-contiguous copy that refuses in-place writes."""
    out = np.array(arr, copy=True, order="C")
    out.setflags(write=False)
    return out
