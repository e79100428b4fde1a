"""Oriented-box and convex-polygon geometry.

Coordinates are image coordinates (x right, y down). A box angle ``theta`` rotates
the box's width axis from +x towards +y, which reads as clockwise on screen.
Canonical boxes follow the long-edge convention: ``w >= h`` and
``theta`` in ``[-pi/2, pi/2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import InvalidArgumentError

HALF_PI = 0.5 * math.pi
EPS_EDGE = 1e-9
EPS_AREA = 1e-12


def wrap_half_pi(theta: float) -> float:
    """Wrap an angle into ``[-pi/2, pi/2)``; in-range values are returned untouched."""
    if -HALF_PI <= theta < HALF_PI:
        return theta
    out =(theta + HALF_PI) % math.pi - HALF_PI
    if out >= HALF_PI:
        out -= math.pi
    if out < -HALF_PI:
        out = -HALF_PI
    return out


@dataclass(frozen=True)
class OrientedBox:
    cx: float
    cy: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidArgumentError(f"non-finite box field in {vals}")
        if self.w <= 0 or self.h <= 0:
            raise InvalidArgumentError(f"box extents must be positive, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h, self.theta], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "OrientedBox":
        return cls(*(float(v) for v in a[:5]))


@dataclass(frozen=True)
class AlignedBox:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise InvalidArgumentError(f"degenerate aligned box {self}")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax)

    def as_array(self) -> np.ndarray:
        return np.array([self.xmin, self.ymin, self.xmax, self.ymax], dtype=np.float64)

    def to_oriented(self) -> OrientedBox:
        cx, cy = self.center
        return OrientedBox(cx, cy, self.width, self.height, 0.0)


class ConvexPolygon:
    """Counter-clockwise convex polygon (positive shoelace area)."""

    __slots__ = ("vertices",)

    def __init__(self, vertices, check: bool = True):
        v = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
        if check:
            if not 3 <= len(v) <= 8:
                raise InvalidArgumentError(f"polygon needs 3..8 vertices, got {len(v)}")
            if _signed_area(v) <= 0:
                raise InvalidArgumentError("polygon vertices must be counter-clockwise")
            if not _is_convex(v):
                raise InvalidArgumentError("polygon is not convex")
        self.vertices = v

    @property
    def area(self) -> float:
        return _signed_area(self.vertices)

    def __len__(self):
        return len(self.vertices)

    def __repr__(self):
        return f"ConvexPolygon({self.vertices.tolist()})"


def _signed_area(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _is_convex(v: np.ndarray) -> bool:
    e = np.roll(v, -1, axis=0) - v
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    return bool(np.all(cross >= -EPS_EDGE))


def canonicalize(b: OrientedBox) -> OrientedBox:
    """Long-edge form of ``b``; covers the same point set."""
    w, h, theta = b.w, b.h, b.theta
    if w < h:
        w, h, theta = h, w, theta + HALF_PI
    return OrientedBox(b.cx, b.cy, w, h, wrap_half_pi(theta))


def vertices(b: OrientedBox) -> ConvexPolygon:
    c, s = math.cos(b.theta), math.sin(b.theta)
    hw, hh = 0.5 * b.w, 0.5 * b.h
    local = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
    rot = np.array([[c, -s], [s, c]])
    pts = local @ rot.T + np.array([b.cx, b.cy])
    return ConvexPolygon(pts, check=False)


def _dedupe(pts: list) -> list:
    """Drop repeated and collinear vertices of a closed polyline."""
    out = []
    for p in pts:
        if not out or abs(p[0] - out[-1][0]) > EPS_EDGE or abs(p[1] - out[-1][1]) > EPS_EDGE:
            out.append(p)
    if len(out) > 1 and abs(out[0][0] - out[-1][0]) <= EPS_EDGE and abs(out[0][1] - out[-1][1]) <= EPS_EDGE:
        out.pop()
    changed = True
    while changed and len(out) >= 3:
        changed = False
        for i in range(len(out)):
            a, b, c = out[i - 1], out[i], out[(i + 1) % len(out)]
            cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
            if abs(cross) <= EPS_EDGE:
                out.pop(i)
                changed = True
                break
    return out


def clip(p: ConvexPolygon, q: ConvexPolygon) -> ConvexPolygon | None:
    """Intersection of two convex polygons (Sutherland-Hodgman), or None if empty."""
    out = [tuple(v) for v in p.vertices.tolist()]
    clipper = q.vertices.tolist()
    n = len(clipper)
    for i in range(n):
        if not out:
            return None
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        m = len(inp)
        for j in range(m):
            cur = inp[j]
            prev = inp[j - 1]
            dc = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            dp = ex * (prev[1] - ay) - ey * (prev[0] - ax)
            cin, pin = dc >= -EPS_EDGE, dp >= -EPS_EDGE
            if cin:
                if not pin:
                    t = dp / (dp - dc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif pin:
                t = dp / (dp - dc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
    out = _dedupe(out)
    if len(out) < 3:
        return None
    poly = ConvexPolygon(out, check=False)
    if poly.area < EPS_AREA:
        return None
    return poly


def intersection_area(a: OrientedBox, b: OrientedBox) -> float:
    ha, hb = circumscribed_hbox(a), circumscribed_hbox(b)
    if ha.xmax <= hb.xmin or hb.xmax <= ha.xmin or ha.ymax <= hb.ymin or hb.ymax <= ha.ymin:
        return 0.0
    inter = clip(vertices(a), vertices(b))
    return 0.0 if inter is None else inter.area


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    inter = intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.area + b.area - inter
    return min(1.0, max(0.0, inter / union))


def rotated_iou_matrix(boxes_a: Iterable[OrientedBox], boxes_b: Iterable[OrientedBox]) -> np.ndarray:
    boxes_a, boxes_b = list(boxes_a), list(boxes_b)
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = rotated_iou(a, b)
    return out


def circumscribed_hbox(b: OrientedBox) -> AlignedBox:
    """Tightest axis-aligned box containing ``b``."""
    c, s = abs(math.cos(b.theta)), abs(math.sin(b.theta))
    hx = 0.5 * b.w * c + 0.5 * b.h * s
    hy = 0.5 * b.w * s + 0.5 * b.h * c
    return AlignedBox(b.cx - hx, b.cy - hy, b.cx + hx, b.cy + hy)


def project_box(pred: OrientedBox, target_theta: float) -> OrientedBox:
    """Circumscribed rectangle of ``pred`` in the frame rotated by ``target_theta``.

    The result keeps the prediction's center and takes the target angle.
    """
    d = pred.theta - target_theta
    c, s = abs(math.cos(d)), abs(math.sin(d))
    w = pred.w * c + pred.h * s
    h = pred.w * s + pred.h * c
    return OrientedBox(pred.cx, pred.cy, w, h, target_theta)


def point_in_box(b: OrientedBox, x, y):
    """Vectorised inside test for points ``(x, y)`` (boundary inclusive)."""
    c, s = math.cos(b.theta), math.sin(b.theta)
    dx, dy = np.asarray(x) - b.cx, np.asarray(y) - b.cy
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (np.abs(u) <= 0.5 * b.w) & (np.abs(v) <= 0.5 * b.h)


def nms_rotated(boxes: list, scores, iou_threshold: float = 0.5) -> list:
    """Greedy NMS; returns kept indices in descending score order (ties by index)."""
    scores = np.asarray(scores, dtype=np.float64)
    order = list(np.argsort(-scores, kind="stable"))
    kept = []
    while order:
        i = order.pop(0)
        kept.append(int(i))
        order = [j for j in order if rotated_iou(boxes[i], boxes[j]) <= iou_threshold]
    return kept
