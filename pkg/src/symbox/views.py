"""View generation: vertical flip, rotation with padding, and the matching box/point transforms.

Images are 2-D float arrays indexed ``[row, col]``; a point is ``(x, y) = (col, row)``.
Rotations turn the image clockwise on screen (y points down) about the pixel-grid
center ``((W - 1) / 2, (H - 1) / 2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError
from .geometry import OrientedBox, canonicalize

KINDS = ("identity", "vflip", "rotate")
PADDINGS = ("reflection", "zeros")


@dataclass(frozen=True)
class ViewTransform:
    kind: str = "identity"
    R: float = 0.0
    padding: str = "reflection"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown view kind {self.kind!r}")
        if self.padding not in PADDINGS:
            raise InvalidArgumentError(f"unknown padding {self.padding!r}")

    @property
    def steps(self) -> tuple:
        return (self,)

    def matrix(self, size) -> np.ndarray:
        """Homogeneous 3x3 map of points for an image of shape ``(H, W)``."""
        h, w = size
        if self.kind == "identity":
            return np.eye(3)
        if self.kind == "vflip":
            return np.array([[1.0, 0.0, 0.0], [0.0, -1.0, h - 1.0], [0.0, 0.0, 1.0]])
        c, s = math.cos(self.R), math.sin(self.R)
        cx, cy = 0.5 * (w - 1), 0.5 * (h - 1)
        rot = np.array([[c, -s], [s, c]])
        t = np.array([cx, cy]) - rot @ np.array([cx, cy])
        m = np.eye(3)
        m[:2, :2], m[:2, 2] = rot, t
        return m


@dataclass(frozen=True)
class ComposedTransform:
    """Sequential application of transforms, first element first."""
    steps: tuple

    def matrix(self, size) -> np.ndarray:
        m = np.eye(3)
        for t in self.steps:
            m = t.matrix(size) @ m
        return m


def compose(*transforms) -> ComposedTransform:
    """``compose(t2, t1)`` applies ``t1`` first, like function composition."""
    steps = []
    for t in reversed(transforms):
        steps.extend(t.steps)
    return ComposedTransform(tuple(steps))


def vflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[::-1])


def rotate(img: np.ndarray, R: float, padding: str = "reflection") -> np.ndarray:
    """Clockwise rotation by ``R`` radians with bilinear sampling.

    Samples falling outside the image are mirrored back in (edge pixel not repeated)
    or set to zero.
    """
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise InvalidArgumentError(f"rotate needs a square 2-D raster, got {img.shape}")
    if padding not in PADDINGS:
        raise InvalidArgumentError(f"unknown padding {padding!r}")
    if R == 0.0:
        return img.copy()
    h, w = img.shape
    cx, cy = 0.5 * (w - 1), 0.5 * (h - 1)
    c, s = math.cos(R), math.sin(R)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    # inverse map: source = Rot(-R) (q - c) + c
    sx = c * dx + s * dy + cx
    sy = -s * dx + c * dy + cy
    mode = "mirror" if padding == "reflection" else "constant"
    return ndimage.map_coordinates(img, [sy, sx], order=1, mode=mode, cval=0.0)


def apply(img: np.ndarray, t) -> np.ndarray:
    for step in t.steps:
        if step.kind == "vflip":
            img = vflip(img)
        elif step.kind == "rotate":
            img = rotate(img, step.R, step.padding)
        else:
            img = img.copy()
    return img


def transform_point(p, t, size) -> tuple[float, float]:
    m = t.matrix(size)
    x, y = p
    return (m[0, 0] * x + m[0, 1] * y + m[0, 2], m[1, 0] * x + m[1, 1] * y + m[1, 2])


def transform_points(pts: np.ndarray, t, size) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    m = t.matrix(size)
    return pts @ m[:2, :2].T + m[:2, 2]


def transform_rbox(b: OrientedBox, t, size) -> OrientedBox:
    cx, cy = transform_point((b.cx, b.cy), t, size)
    theta = b.theta
    for step in t.steps:
        if step.kind == "vflip":
            theta = -theta
        elif step.kind == "rotate":
            theta = theta + step.R
    return canonicalize(OrientedBox(cx, cy, b.w, b.h, theta))


def transform_angle(theta: float, t) -> float:
    for step in t.steps:
        if step.kind == "vflip":
            theta = -theta
        elif step.kind == "rotate":
            theta = theta + step.R
    return theta


def inside_image(p, size) -> bool:
    h, w = size
    return 0.0 <= p[0] <= w - 1 and 0.0 <= p[1] <= h - 1


def center_crop_square(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    n = min(h, w)
    r0, c0 = (h - n) // 2, (w - n) // 2
    return img[r0:r0 + n, c0:c0 + n]


def sample_rotation(rng: np.random.Generator, rotation_range=(math.pi / 4, 3 * math.pi / 4)) -> float:
    lo, hi = rotation_range
    return float(rng.uniform(lo, hi))
