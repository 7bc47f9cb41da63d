"""Small input-validation helpers shared by the estimators."""
import numpy as np
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array


def check_coords(X, dim=3):
    X = check_array(X, dtype=float, ensure_2d=True, ensure_all_finite=True, copy=False)
    if X.shape[1] != dim:
        raise ValueError(f"expected {dim}-D coordinates, got shape {X.shape}")
    return X


def check_is_fitted(est, attr):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


def check_fraction(name, value, hi=1.0):
    if not 0.0 <= value <= hi:
        raise ValueError(f"{name} must be in [0, {hi}], got {value}")
    return float(value)


def check_count(name, value, minimum=0):
    if int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value}")
    return int(value)


def as_int_array(values):
    return np.asarray(values, dtype=np.int64)
