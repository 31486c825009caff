"""Input validation helpers shared by the functional API and the estimators."""

import numpy as np
from sklearn.utils import check_array


def check_image(img, name="image", unit_range=True):
    """Return ``img`` as a finite 2D float64 array, optionally checking [0, 1]."""
    arr = check_array(img, dtype=np.float64, ensure_2d=True, ensure_min_samples=1,
                      ensure_min_features=1, input_name=name)
    if unit_range and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1], got [{arr.min()}, {arr.max()}]")
    return arr


def check_image_stack(X, name="X", unit_range=True):
    """Accept one image (H, W) or a stack (N, H, W); always return (N, H, W) float64."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] == 0 or arr.shape[1] == 0 or arr.shape[2] == 0:
        raise ValueError(f"{name} must be an image (H, W) or a stack (N, H, W), got shape {np.shape(X)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if unit_range and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_same_shape(a, b, what="images"):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what} must have identical dimensions, got {np.shape(a)} and {np.shape(b)}")


def check_levels(levels):
    if int(levels) != levels or levels < 2:
        raise ValueError(f"levels must be an integer >= 2, got {levels}")
    return int(levels)
