"""Input checks shared by the estimator and CLI front ends."""

import numpy as np

from .exceptions import ShapeError


def check_images(X, side=None, allow_unnormalized=False):
    """Return ``X`` as a float ``(n, H, W, 3)`` array, validated.

    Values must already be normalized to ``[-0.5, 0.5]`` unless
    ``allow_unnormalized`` is set.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ShapeError(f"expected images of shape (n, H, W, 3), got {X.shape}")
    if side is not None and X.shape[1:3] != (side, side):
        raise ShapeError(f"expected {side}x{side} images, got {X.shape[1]}x{X.shape[2]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    if not allow_unnormalized and (X.min() < -0.5 - 1e-9 or X.max() > 0.5 + 1e-9):
        raise ValueError("images must be normalized to [-0.5, 0.5]; see normalize_pixels")
    return X


def check_landmarks(y, n_points=None):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 2 and y.shape[-1] != 2:
        y = y.reshape(len(y), -1, 2)
    if y.ndim != 3 or y.shape[-1] != 2:
        raise ShapeError(f"expected landmarks of shape (n, N, 2), got {y.shape}")
    if n_points is not None and y.shape[1] != n_points:
        raise ShapeError(f"expected {n_points} landmarks, got {y.shape[1]}")
    if not np.all(np.isfinite(y)):
        raise ValueError("landmarks contain non-finite values")
    return y


def check_consistent_length(*arrays):
    lengths = {len(a) for a in arrays}
    if len(lengths) > 1:
        raise ValueError(f"inputs have inconsistent lengths: {sorted(lengths)}")
