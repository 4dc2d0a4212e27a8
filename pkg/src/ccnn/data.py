"""Dataset ingestion (.pts annotations) and the synthetic face generator.

Dataset root layout::

    root/
      image_001.png      # any of .png .jpg .jpeg .bmp
      image_001.pts      # 300-W style annotation next to each image
      boxes.csv          # optional: name,x,y,width,height per image

Images without a ``boxes.csv`` row get the tight landmark box inflated by
``inflate`` (20% by default).
"""

from __future__ import annotations

import colorsys
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .exceptions import EmptyDatasetError, PtsParseError
from .geometry import BoundingBox, LandmarkSet, crop_and_resize, normalize_pixels

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
BOX_SIDECAR = "boxes.csv"
DEFAULT_INFLATE = 0.2


# --------------------------------------------------------------------------- .pts


def parse_pts(text):
    """Parse a 300-W ``.pts`` annotation into an ``(n_points, 2)`` array.

    Grammar: a ``version:`` line, an ``n_points:`` line, ``{``, one
    ``x y`` pair per line, ``}``. Blank lines are ignored.
    """
    lines = text.splitlines()
    n_points = None
    version_seen = False
    i = 0
    while i < len(lines):
        raw = lines[i].strip()
        lineno = i + 1
        i += 1
        if not raw:
            continue
        if raw == "{":
            break
        key, sep, value = raw.partition(":")
        if not sep:
            raise PtsParseError(f"expected 'key: value' header, got {raw!r}", lineno)
        key = key.strip().lower()
        if key == "version":
            version_seen = True
        elif key == "n_points":
            try:
                n_points = int(value)
            except ValueError:
                raise PtsParseError(f"bad n_points value {value.strip()!r}", lineno) from None
            if n_points < 0:
                raise PtsParseError("n_points must be non-negative", lineno)
        else:
            raise PtsParseError(f"unknown header field {key!r}", lineno)
    else:
        raise PtsParseError("missing opening brace '{'", len(lines) or None)
    if not version_seen:
        raise PtsParseError("missing 'version:' header", 1)
    if n_points is None:
        raise PtsParseError("missing 'n_points:' header", 1)

    points = []
    while i < len(lines):
        raw = lines[i].strip()
        lineno = i + 1
        i += 1
        if not raw:
            continue
        if raw == "}":
            if len(points) != n_points:
                raise PtsParseError(
                    f"n_points is {n_points} but {len(points)} coordinate pairs were given",
                    lineno,
                )
            trailing = [l for l in lines[i:] if l.strip()]
            if trailing:
                raise PtsParseError("content after closing brace", i + 1)
            return np.array(points, dtype=np.float64).reshape(-1, 2)
        parts = raw.split()
        if len(parts) != 2:
            raise PtsParseError(f"expected 'x y', got {raw!r}", lineno)
        try:
            points.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise PtsParseError(f"non-numeric coordinate in {raw!r}", lineno) from None
    raise PtsParseError("missing closing brace '}'", len(lines))


def format_pts(points, precision=3):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    body = "\n".join(f"{x:.{precision}f} {y:.{precision}f}" for x, y in pts)
    return f"version: 1\nn_points: {len(pts)}\n{{\n{body}\n}}\n"


def read_pts(path):
    return parse_pts(Path(path).read_text())


def write_pts(path, points, precision=3):
    Path(path).write_text(format_pts(points, precision))


# ------------------------------------------------------------------------ samples


@dataclass
class Sample:
    landmarks: LandmarkSet
    box: BoundingBox
    image: np.ndarray = None
    path: str = None
    source: str = ""
    value_range: tuple = (0, 255)

    def load_image(self):
        if self.image is not None:
            return self.image
        img = cv2.imread(str(self.path), cv2.IMREAD_COLOR)
        if img is None:
            raise OSError(f"cannot read image {self.path}")
        return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def _read_boxes(root):
    path = Path(root) / BOX_SIDECAR
    if not path.exists():
        return {}
    boxes = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            boxes[row["name"]] = BoundingBox(
                float(row["x"]), float(row["y"]), float(row["width"]), float(row["height"])
            )
    return boxes


def load_dataset(root, n_points=None, inflate=DEFAULT_INFLATE):
    """Collect ``(image, .pts)`` pairs under ``root`` in lexicographic order.

    Images lacking a readable annotation (or with the wrong point count when
    ``n_points`` is given) are skipped with a warning. Images are not decoded
    here; :meth:`Sample.load_image` does that on demand.
    """
    root = Path(root)
    boxes = _read_boxes(root)
    samples = []
    fallback = 0
    for img_path in sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        pts_path = img_path.with_suffix(".pts")
        if not pts_path.exists():
            logger.warning("skipping %s: no .pts annotation", img_path.name)
            continue
        try:
            pts = read_pts(pts_path)
        except PtsParseError as exc:
            logger.warning("skipping %s: %s", img_path.name, exc)
            continue
        if n_points is not None and len(pts) != n_points:
            logger.warning("skipping %s: %d points, expected %d", img_path.name, len(pts), n_points)
            continue
        box = boxes.get(img_path.name)
        if box is None:
            box = BoundingBox.from_points(pts, inflate)
            fallback += 1
        samples.append(Sample(LandmarkSet(pts, _image_size(img_path)), box, path=str(img_path),
                              source=root.name))
    if not samples:
        raise EmptyDatasetError(f"no usable samples under {root}")
    if fallback:
        logger.info("%d sample(s) use tight landmark boxes inflated by %.0f%%", fallback, 100 * inflate)
    return samples


def _image_size(path):
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        return (1, 1)
    return (img.shape[1], img.shape[0])


def to_arrays(samples, side):
    """Crop, resize and normalize samples.

    Returns ``X`` of shape ``(n, side, side, 3)`` in ``[-0.5, 0.5]`` and
    ``Y`` of shape ``(n, N, 2)`` in crop-frame pixels.
    """
    xs, ys = [], []
    for s in samples:
        img = s.load_image()
        crop, tf = crop_and_resize(img, s.box, side)
        xs.append(normalize_pixels(crop, s.value_range))
        ys.append(tf.forward(s.landmarks))
    return np.stack(xs), np.stack(ys)


# ---------------------------------------------------------------------- synthetic


def _arc(cx, cy, rx, ry, a0, a1, n):
    if n == 1:
        t = np.array([(a0 + a1) / 2])
    else:
        t = np.linspace(a0, a1, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def face_template(n_points=5):
    """Face-like point layout in unit coordinates (fractions of the image side).

    5 points: eye centers, nose tip, mouth corners. 68 points: the iBUG
    ordering (jaw, brows, nose, eyes, outer and inner lips).
    """
    if n_points == 5:
        return np.array(
            [[0.31, 0.40], [0.69, 0.40], [0.50, 0.56], [0.36, 0.72], [0.64, 0.72]]
        )
    if n_points == 68:
        jaw = _arc(0.5, 0.45, 0.36, 0.42, math.pi, 0.0, 17)
        brow_l = _arc(0.32, 0.34, 0.12, 0.04, math.pi, 2 * math.pi, 5)
        brow_r = _arc(0.68, 0.34, 0.12, 0.04, math.pi, 2 * math.pi, 5)
        nose_line = np.stack([np.full(4, 0.5), np.linspace(0.42, 0.56, 4)], axis=1)
        nose_base = np.stack([np.linspace(0.43, 0.57, 5), np.full(5, 0.60)], axis=1)
        eye_l = _arc(0.32, 0.42, 0.07, 0.03, math.pi, 3 * math.pi - math.pi / 3, 6)
        eye_r = _arc(0.68, 0.42, 0.07, 0.03, math.pi, 3 * math.pi - math.pi / 3, 6)
        mouth_o = _arc(0.5, 0.74, 0.15, 0.06, math.pi, 3 * math.pi - math.pi / 6, 12)
        mouth_i = _arc(0.5, 0.74, 0.10, 0.03, math.pi, 3 * math.pi - math.pi / 4, 8)
        return np.concatenate([jaw, brow_l, brow_r, nose_line, nose_base, eye_l, eye_r, mouth_o, mouth_i])
    raise ValueError(f"no built-in template for {n_points} points; pass one explicitly")


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic face generator.

    ``rotation`` is in degrees, ``translation`` a fraction of ``side``,
    ``jitter`` and ``marker_radius`` in pixels, ``noise`` the std of additive
    pixel noise on ``[0, 1]`` intensities.
    """

    n_points: int = 5
    side: int = 64
    template: list = None
    rotation: float = 10.0
    scale: tuple = (0.9, 1.1)
    translation: float = 0.125
    jitter: float = 1.0
    noise: float = 0.03
    marker_radius: float = 1.5
    margin: float = 2.0
    max_retries: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.template is None:
            self.template = face_template(self.n_points).tolist()
        if len(self.template) != self.n_points:
            raise ValueError("template length must equal n_points")
        self.scale = tuple(self.scale)

    @property
    def template_pixels(self):
        return np.asarray(self.template, dtype=np.float64) * self.side

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))

    def to_file(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)


def marker_colors(n):
    return np.array([colorsys.hsv_to_rgb(i / n, 1.0, 1.0) for i in range(n)])


SKIN = np.array([0.85, 0.70, 0.60])
EYE = np.array([0.15, 0.10, 0.10])
LIP = np.array([0.55, 0.20, 0.20])


def _blend(img, alpha, color):
    a = alpha[..., None]
    img *= 1.0 - a
    img += a * color


def _pixel_grid(side):
    c = np.arange(side) + 0.5
    return np.meshgrid(c, c)


def _ellipse_alpha(xx, yy, center, axes, angle):
    ca, sa = math.cos(angle), math.sin(angle)
    dx, dy = xx - center[0], yy - center[1]
    u = (ca * dx + sa * dy) / axes[0]
    v = (-sa * dx + ca * dy) / axes[1]
    dist = (np.sqrt(u * u + v * v) - 1.0) * min(axes)
    return np.clip(0.5 - dist, 0.0, 1.0)


def _segment_alpha(xx, yy, p, q, width):
    d = q - p
    t = np.clip(((xx - p[0]) * d[0] + (yy - p[1]) * d[1]) / max(d @ d, 1e-12), 0.0, 1.0)
    dist = np.hypot(xx - (p[0] + t * d[0]), yy - (p[1] + t * d[1]))
    return np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)


def _disc_alpha(xx, yy, center, radius):
    dist = np.hypot(xx - center[0], yy - center[1])
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def render_face(points, spec, rng=None):
    """Draw a face whose features sit exactly on ``points``.

    Every landmark carries a small disc in its own hue; eyes, nose line and
    mouth strokes give it face context. Only the background level and pixel
    noise are random.
    """
    pts = np.asarray(points, dtype=np.float64)
    side = spec.side
    xx, yy = _pixel_grid(side)
    bg = 0.4 if rng is None else rng.uniform(0.2, 0.6)
    img = np.full((side, side, 3), bg)

    n = len(pts)
    if n == 5:
        eyes, nose_tip, mouth = [pts[0], pts[1]], pts[2], pts[3:5]
    else:
        eyes = [pts[36:42].mean(axis=0), pts[42:48].mean(axis=0)]
        nose_tip, mouth = pts[30], pts[48:60]
    eye_vec = eyes[1] - eyes[0]
    angle = math.atan2(eye_vec[1], eye_vec[0])
    iod = float(np.hypot(*eye_vec))
    center = pts.mean(axis=0)

    _blend(img, _ellipse_alpha(xx, yy, center, (0.95 * iod, 1.25 * iod), angle), SKIN)
    for e in eyes:
        _blend(img, _ellipse_alpha(xx, yy, e, (0.22 * iod, 0.12 * iod), angle), EYE)
    mid = (eyes[0] + eyes[1]) / 2
    _blend(img, _segment_alpha(xx, yy, mid + 0.3 * (nose_tip - mid), nose_tip, 1.2), LIP * 0.8)
    for p, q in zip(mouth[:-1], mouth[1:]):
        _blend(img, _segment_alpha(xx, yy, p, q, 1.5), LIP)
    for p, color in zip(pts, marker_colors(n)):
        _blend(img, _disc_alpha(xx, yy, p, spec.marker_radius), color)
    if rng is not None and spec.noise > 0:
        img += rng.normal(0.0, spec.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def _perturb(template, spec, rng):
    c = np.full(2, spec.side / 2.0)
    theta = math.radians(rng.uniform(-spec.rotation, spec.rotation))
    s = rng.uniform(*spec.scale)
    t = rng.uniform(-spec.translation, spec.translation, 2) * spec.side
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    pts = (template - c) @ (s * rot).T + c + t
    return pts + rng.normal(0.0, spec.jitter, pts.shape)


def sample_landmarks(spec, rng):
    """Draw one perturbed landmark set, resampling until it fits in the frame."""
    template = spec.template_pixels
    lo, hi = spec.margin, spec.side - spec.margin
    for _ in range(spec.max_retries):
        pts = _perturb(template, spec, rng)
        if np.all((pts >= lo) & (pts <= hi)):
            return pts
    raise RuntimeError(f"could not place landmarks in frame after {spec.max_retries} tries")


def generate_synthetic(spec, count, seed=None):
    """``count`` synthetic samples; each uses its own child seed, so sample
    ``i`` is the same regardless of how many are generated."""
    root = np.random.SeedSequence(spec.seed if seed is None else seed)
    samples = []
    for child in root.spawn(count):
        rng = np.random.default_rng(child)
        pts = sample_landmarks(spec, rng)
        img = render_face(pts, spec, rng)
        samples.append(
            Sample(
                LandmarkSet(pts, (spec.side, spec.side)),
                BoundingBox(0.0, 0.0, spec.side, spec.side),
                image=img,
                source="synthetic",
                value_range=(0, 1),
            )
        )
    return samples


def oracle_landmarks(image, spec, window=None):
    """Recover landmarks from a render by color-matching each marker disc.

    Used to certify that the renders carry their labels: argmax of the
    color match, then the match-weighted centroid in a small window.
    """
    img = np.asarray(image, dtype=np.float64)
    colors = marker_colors(spec.n_points)
    r = window or int(math.ceil(spec.marker_radius)) + 1
    xx, yy = _pixel_grid(spec.side)
    out = []
    for color in colors:
        dist = np.linalg.norm(img - color, axis=-1)
        w = np.clip(1.0 - dist / 0.5, 0.0, None)
        score = cv2.GaussianBlur(w, (0, 0), spec.marker_radius)
        row, col = np.unravel_index(np.argmax(score), score.shape)
        sl = (slice(max(row - r, 0), row + r + 1), slice(max(col - r, 0), col + r + 1))
        ww = w[sl]
        out.append([(ww * xx[sl]).sum() / ww.sum(), (ww * yy[sl]).sum() / ww.sum()])
    return np.array(out)


def write_dataset(samples, root, precision=3):
    """Write samples as PNG + .pts pairs (+ ``boxes.csv``) under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / BOX_SIDECAR, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "x", "y", "width", "height"])
        for i, s in enumerate(samples):
            name = f"{s.source or 'sample'}_{i:05d}.png"
            img = s.load_image()
            lo, hi = s.value_range
            u8 = np.clip(np.round((np.asarray(img, dtype=np.float64) - lo) / (hi - lo) * 255), 0, 255)
            cv2.imwrite(str(root / name), cv2.cvtColor(u8.astype(np.uint8), cv2.COLOR_RGB2BGR))
            write_pts((root / name).with_suffix(".pts"), s.landmarks.points, precision)
            writer.writerow([name, s.box.x, s.box.y, s.box.width, s.box.height])
    return root
