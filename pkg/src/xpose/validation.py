"""Input validation helpers shared by estimators and protocols."""

import numpy as np

from .exceptions import ShapeError

__all__ = ["check_images", "check_labels", "check_unit_range"]


def check_images(X, input_spec=None, dtype=np.float32):
    """Return ``X`` as a finite 4-D NHWC array of ``dtype``.

    If ``input_spec`` ``(h, w, c, ...)`` is given the spatial shape must match.
    """
    X = np.asarray(X)
    if X.ndim != 4:
        raise ShapeError(f"expected a 4-D [b, h, w, c] image batch, got shape {X.shape}")
    if X.dtype != dtype:
        X = X.astype(dtype)
    if not np.all(np.isfinite(X)):
        raise ValueError("image batch contains non-finite values")
    if input_spec is not None and X.shape[1:] != tuple(input_spec[:3]):
        raise ShapeError(f"expected images of shape {tuple(input_spec[:3])}, got {X.shape[1:]}")
    return X


def check_unit_range(X, name="images"):
    if X.size and (X.min() < 0 or X.max() > 1):
        raise ValueError(f"{name} must lie in [0, 1], got [{X.min()}, {X.max()}]")
    return X


def check_labels(y, num_classes, n=None):
    """Integer labels in ``[0, num_classes)``; optional length check."""
    y = np.asarray(y)
    if y.ndim != 1 or (n is not None and len(y) != n):
        raise ShapeError(f"expected {n if n is not None else 'a 1-D array of'} labels, got shape {y.shape}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("labels must be integers")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got [{y.min()}, {y.max()}]")
    return y
