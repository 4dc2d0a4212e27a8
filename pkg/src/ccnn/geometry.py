"""Landmark and bounding-box geometry.

Coordinates are continuous pixel coordinates: pixel ``(row, col)`` covers
``[col, col + 1) x [row, row + 1)`` so its center sits at ``(col + 0.5,
row + 0.5)``. Points are stored as ``(N, 2)`` arrays of ``(x, y)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .exceptions import (
    InvalidBoxError,
    UnsupportedConventionError,
)

NORMALIZATION_MODES = ("inter_ocular", "inter_pupil")


@dataclass(frozen=True)
class EyeConvention:
    """Which landmark indices define the eyes for a given annotation scheme."""

    n_points: int
    left_outer: int
    right_outer: int
    left_eye: tuple
    right_eye: tuple


# 68-point iBUG / Multi-PIE ordering, 0-based.
IBUG68 = EyeConvention(68, 36, 45, tuple(range(36, 42)), tuple(range(42, 48)))
# eye centers, nose tip, mouth corners
FIVE_POINT = EyeConvention(5, 0, 1, (0,), (1,))

_CONVENTIONS = {68: IBUG68, 5: FIVE_POINT}


def default_convention(n_points):
    try:
        return _CONVENTIONS[n_points]
    except KeyError:
        raise UnsupportedConventionError(f"no eye convention known for {n_points} landmarks") from None


@dataclass
class LandmarkSet:
    points: np.ndarray
    frame_size: tuple = (256, 256)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("landmark coordinates must be finite")
        w, h = self.frame_size
        if w <= 0 or h <= 0:
            raise ValueError(f"frame_size must be positive, got {self.frame_size}")

    def __len__(self):
        return len(self.points)

    def __array__(self, dtype=None, copy=None):
        return self.points if dtype is None else self.points.astype(dtype)


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise InvalidBoxError(f"box must have positive size, got {self}")

    @property
    def center(self):
        return self.x + self.width / 2.0, self.y + self.height / 2.0

    @classmethod
    def from_points(cls, points, inflate=0.0):
        """Tight box around ``points``, grown by ``inflate`` (0.2 = 20%) of each side."""
        pts = as_points(points)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        size = np.maximum(hi - lo, 1e-6) * (1.0 + inflate)
        cx, cy = (lo + hi) / 2.0
        return cls(cx - size[0] / 2, cy - size[1] / 2, float(size[0]), float(size[1]))


@dataclass(frozen=True)
class CropTransform:
    """Affine map from the original frame onto a ``side x side`` crop.

    ``x' = (x - x0) * side / size`` and likewise for ``y``.
    """

    x0: float
    y0: float
    size: float
    side: int = field(default=256)

    @property
    def scale(self):
        return self.side / self.size

    def forward(self, points):
        pts = as_points(points)
        return (pts - (self.x0, self.y0)) * self.scale

    def inverse(self, points):
        pts = as_points(points)
        return pts / self.scale + (self.x0, self.y0)

    def matrix(self):
        """2x3 matrix in cv2's pixel-index convention (pixel centers at integers)."""
        s = self.scale
        return np.array(
            [
                [s, 0.0, 0.5 * s - 0.5 - s * self.x0],
                [0.0, s, 0.5 * s - 0.5 - s * self.y0],
            ]
        )


def as_points(points):
    if isinstance(points, LandmarkSet):
        return points.points
    return np.asarray(points, dtype=np.float64).reshape(-1, 2)


def square_crop(box, side=256):
    """Extend the shorter side of ``box`` symmetrically to a square."""
    size = max(box.width, box.height)
    cx, cy = box.center
    return CropTransform(cx - size / 2.0, cy - size / 2.0, float(size), int(side))


def crop_and_resize(image, box, side=256):
    """Cut the squared-up ``box`` out of ``image`` and resample it to ``side``.

    Area outside the image is zero-padded; resampling is bilinear.

    Returns
    -------
    crop : ndarray, shape (side, side, C)
    transform : CropTransform
        Use it to carry landmarks into (and back out of) the crop frame.
    """
    if side <= 0:
        raise ValueError("side must be positive")
    image = np.asarray(image)
    h, w = image.shape[:2]
    if box.x >= w or box.y >= h or box.x + box.width <= 0 or box.y + box.height <= 0:
        raise InvalidBoxError(f"box {box} does not intersect a {w}x{h} image")
    tf = square_crop(box, side)
    src = image.astype(np.float64) if image.dtype != np.float32 else image
    out = cv2.warpAffine(
        src,
        tf.matrix(),
        (side, side),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=0,
    )
    if out.ndim == 2 and image.ndim == 3:
        out = out[..., None]
    return out, tf


def transform_landmarks(landmarks, transform):
    """Map landmarks into a crop frame; ``transform.inverse`` undoes it."""
    pts = transform.forward(landmarks)
    return LandmarkSet(pts, (transform.side, transform.side))


def normalize_pixels(image, value_range):
    """Affinely map pixel values from ``value_range`` onto ``[-0.5, 0.5]``.

    ``value_range`` must be declared explicitly, typically ``(0, 255)`` or
    ``(0, 1)``.
    """
    if value_range is None:
        raise UnsupportedConventionError("input value range must be declared")
    lo, hi = (float(v) for v in value_range)
    if not hi > lo:
        raise UnsupportedConventionError(f"bad value range {value_range}")
    image = np.asarray(image, dtype=np.float64)
    return (image - lo) / (hi - lo) - 0.5


def normalization_distance(landmarks, mode="inter_ocular", convention=IBUG68):
    """Inter-ocular (outer eye corners) or inter-pupil (eye centroids) distance.

    ``convention`` defaults to the 68-point iBUG layout; other point counts
    need their own :class:`EyeConvention`.
    """
    pts = as_points(landmarks)
    if len(pts) != convention.n_points:
        raise UnsupportedConventionError(
            f"convention expects {convention.n_points} landmarks, got {len(pts)}"
        )
    if mode == "inter_ocular":
        a, b = pts[convention.left_outer], pts[convention.right_outer]
        return float(np.linalg.norm(a - b))
    if mode == "inter_pupil":
        left = pts[list(convention.left_eye)].mean(axis=0)
        right = pts[list(convention.right_eye)].mean(axis=0)
        return float(np.linalg.norm(left - right))
    raise UnsupportedConventionError(f"unknown normalization mode {mode!r}")


def check_inside(points, frame_size):
    """Boolean mask of points inside ``[0, w) x [0, h)``."""
    pts = as_points(points)
    w, h = frame_size
    return (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
