"""Input checks shared by the functional API and the estimators."""

import numbers

import numpy as np
from sklearn.utils import check_array


def check_popularities(popularities, name="popularities"):
    """Return a 1-d float64 array of finite, non-negative request rates."""
    lam = check_array(popularities, ensure_2d=False, dtype=np.float64,
                      input_name=name)
    if lam.ndim != 1:
        raise ValueError(f"{name} must be 1-d, got shape {lam.shape}")
    if np.any(lam < 0):
        raise ValueError(f"{name} must be non-negative")
    return lam


def check_replicas(replicas, n=None, name="replicas"):
    """Return a 1-d int64 array of non-negative replica counts."""
    arr = check_array(replicas, ensure_2d=False, dtype=None, input_name=name)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-d, got shape {arr.shape}")
    if arr.dtype.kind == "f":
        if not np.all(arr == np.round(arr)):
            raise ValueError(f"{name} must be integral")
    elif arr.dtype.kind not in "iu":
        raise ValueError(f"{name} must be numeric")
    arr = arr.astype(np.int64)
    if np.any(arr < 0):
        raise ValueError(f"{name} must be non-negative")
    if n is not None and arr.shape[0] != n:
        raise ValueError(f"{name} has length {arr.shape[0]}, expected {n}")
    return arr


def check_positive_int(value, name, minimum=1):
    if not isinstance(value, numbers.Integral) or isinstance(value, bool):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)
