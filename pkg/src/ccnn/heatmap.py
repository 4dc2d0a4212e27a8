"""Gaussian heatmap encoding/decoding and coordinate residuals.

Heatmaps are channels-last, ``(..., S, S, N)``. Cell ``(u, v)`` (column,
row) covers input pixels ``[u*stride, (u+1)*stride)`` horizontally, so a
landmark at ``x`` sits at fractional cell coordinate ``x / stride - 0.5``.
No sub-cell refinement is done on decode; that is the regression cascade's
job.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import as_points

DEFAULT_SIGMA = 1.3


@dataclass
class HeatmapStack:
    grid: np.ndarray
    stride: float = 4.0
    clamped: np.ndarray = field(default=None, repr=False)

    @property
    def side(self):
        return self.grid.shape[-2]

    @property
    def n_points(self):
        return self.grid.shape[-1]


def _points_array(landmarks):
    arr = np.asarray(landmarks.points if hasattr(landmarks, "points") else landmarks,
                     dtype=np.float64)
    if arr.shape[-1] != 2:
        raise ValueError(f"expected (..., N, 2) landmarks, got shape {arr.shape}")
    return arr


def encode(landmarks, side=64, sigma=DEFAULT_SIGMA, stride=4.0):
    """Render one unnormalized Gaussian (peak 1) per landmark.

    ``sigma`` is in heatmap cells. Landmarks outside the frame are clamped to
    the border cell; ``HeatmapStack.clamped`` marks them and a warning is
    issued.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pts = _points_array(landmarks)
    extent = side * stride
    clamped = np.any((pts < 0) | (pts >= extent), axis=-1)
    centers = pts / stride - 0.5
    clamped_centers = np.where(clamped[..., None], np.clip(centers, 0.0, side - 1.0), centers)
    if np.any(clamped):
        warnings.warn(f"{int(clamped.sum())} landmark(s) outside the heatmap frame were clamped")

    cells = np.arange(side, dtype=np.float64)
    u = clamped_centers[..., 0]
    v = clamped_centers[..., 1]
    # (..., N, S) separable factors -> (..., S_rows, S_cols, N)
    gx = np.exp(-((cells - u[..., None]) ** 2) / (2.0 * sigma**2))
    gy = np.exp(-((cells - v[..., None]) ** 2) / (2.0 * sigma**2))
    grid = np.einsum("...nr,...nc->...rcn", gy, gx)
    return HeatmapStack(grid, float(stride), clamped)


def decode(heatmaps, stride=None, return_flags=False):
    """Landmarks at each channel's first (row-major) argmax cell center.

    A channel with no unique information (all values equal) decodes to cell
    ``(0, 0)`` and is flagged as degenerate.
    """
    if isinstance(heatmaps, HeatmapStack):
        grid = heatmaps.grid
        stride = heatmaps.stride if stride is None else stride
    else:
        grid = np.asarray(heatmaps)
        stride = 4.0 if stride is None else stride
    *lead, rows, cols, n = grid.shape
    flat = np.moveaxis(grid, -1, -3).reshape(*lead, n, rows * cols)
    idx = np.argmax(flat, axis=-1)
    v, u = np.divmod(idx, cols)
    pts = np.stack([(u + 0.5) * stride, (v + 0.5) * stride], axis=-1).astype(np.float64)
    if not return_flags:
        return pts
    degenerate = flat.max(axis=-1) == flat.min(axis=-1)
    return pts, degenerate


def vectorize(landmarks):
    """Interleave ``(N, 2)`` points into ``(x1, y1, ..., xN, yN)``."""
    pts = _points_array(landmarks)
    return pts.reshape(*pts.shape[:-2], -1)


def unvectorize(vec):
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape[-1] % 2:
        raise ValueError("coordinate vector must have even length")
    return vec.reshape(*vec.shape[:-1], -1, 2)


def residual(gt, est):
    """``vec(gt) - vec(est)`` in the units of the inputs."""
    g, e = _points_array(gt), _points_array(est)
    if g.shape != e.shape:
        raise ValueError(f"landmark sets disagree: {g.shape} vs {e.shape}")
    return vectorize(g) - vectorize(e)


def apply_residual(est, delta):
    """Add an interleaved coordinate correction to ``est``; inverse of :func:`residual`."""
    e = _points_array(est)
    d = np.asarray(delta, dtype=np.float64)
    if d.shape[-1] != 2 * e.shape[-2]:
        raise ValueError(f"delta of length {d.shape[-1]} does not fit {e.shape[-2]} points")
    return e + unvectorize(d)
