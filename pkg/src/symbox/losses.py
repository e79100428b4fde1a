"""Training objectives: snap loss, flip/rotate consistency, CircumIoU and FCOS-style WS terms.

All functions build nodes on the autodiff graph. Angles entering the snap loss
are compared against the whole family ``k*pi + target``; the integer ``k`` is
picked in the forward pass and the gradient flows through that branch only.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .angle import phase_offsets, snap_shift_array
from .errors import DegenerateCodeError, InvalidArgumentError
from .geometry import HALF_PI, OrientedBox

IOU_FLOOR = 1e-6
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass(frozen=True)
class LossWeights:
    lambda_flp: float = 0.05
    mu_cn: float = 1.0
    mu_box: float = 1.0
    mu_ss: float = 1.0
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise InvalidArgumentError(f"loss weight {k} must be finite and >= 0, got {v}")


# ---------------------------------------------------------------- angle decoding on the graph

def decode_angle(code) -> ad.Tensor:
    """Differentiable phase-shift decode along the last axis; result in ``[-pi/2, pi/2)``."""
    code = ad.as_tensor(code)
    phi = phase_offsets(code.shape[-1])
    y = ad.sum(code * (-np.sin(phi)), axis=-1)
    x = ad.sum(code * np.cos(phi), axis=-1)
    if np.any((np.abs(y.data) < 1e-12) & (np.abs(x.data) < 1e-12)):
        raise DegenerateCodeError("cannot decode an all-zero phase accumulator", op="decode")
    theta = 0.5 * ad.atan2(y, x)
    wrap = np.where(theta.data >= HALF_PI - 1e-12, math.pi, 0.0)
    return theta - wrap if np.any(wrap) else theta


# ---------------------------------------------------------------- SS branch

def snap_loss(theta_pred, theta_target, beta: float = 1.0) -> ad.Tensor:
    """Elementwise ``min_k smooth_l1(theta_pred - (k*pi + theta_target))``."""
    theta_pred = ad.as_tensor(theta_pred)
    shift = snap_shift_array(theta_pred.data, theta_target)
    return ad.smooth_l1(theta_pred - shift, beta)


def flip_consistency_loss(theta, theta_flp, beta: float = 1.0) -> ad.Tensor:
    return snap_loss(ad.as_tensor(theta_flp) + theta, 0.0, beta)


def rotate_consistency_loss(theta, theta_rot, rotation, beta: float = 1.0) -> ad.Tensor:
    return snap_loss(ad.as_tensor(theta_rot) - theta, rotation, beta)


def ss_loss(theta, theta_flp, theta_rot, rotation, weights: LossWeights = LossWeights(),
            return_parts: bool = False):
    """Mean over matched objects of ``lambda * L_flp + L_rot``.

    ``rotation`` holds the per-object rotation used to build its rotated view.
    An empty match set gives a zero loss with no gradient path.
    """
    theta = ad.as_tensor(theta)
    if theta.size == 0:
        zero = ad.Tensor(0.0)
        return (zero, {"flp": zero, "rot": zero}) if return_parts else zero
    beta = weights.smooth_l1_beta
    l_flp = ad.mean(flip_consistency_loss(theta, theta_flp, beta))
    l_rot = ad.mean(rotate_consistency_loss(theta, theta_rot, rotation, beta))
    total = weights.lambda_flp * l_flp + l_rot
    return (total, {"flp": l_flp, "rot": l_rot}) if return_parts else total


# ---------------------------------------------------------------- WS branch

def _box_columns(boxes):
    """Split a box tensor/array/OrientedBox into five (possibly graph) columns."""
    if isinstance(boxes, OrientedBox):
        boxes = boxes.as_array()
    t = ad.as_tensor(boxes)
    if t.shape[-1] != 5:
        raise InvalidArgumentError(f"expected (..., 5) boxes, got {t.shape}")
    return [t[..., i] for i in range(5)]


def _as_box_array(boxes) -> np.ndarray:
    if isinstance(boxes, OrientedBox):
        return boxes.as_array()
    if isinstance(boxes, (list, tuple)) and boxes and isinstance(boxes[0], OrientedBox):
        return np.stack([b.as_array() for b in boxes])
    return np.asarray(boxes.data if isinstance(boxes, ad.Tensor) else boxes, dtype=np.float64)


def framed_iou(pred, gt) -> ad.Tensor:
    """IoU between the projection of ``pred`` onto each gt frame and the gt box itself."""
    cx, cy, w, h, th = _box_columns(pred)
    g = _as_box_array(gt)
    gcx, gcy, gw, gh, gth = (g[..., i] for i in range(5))
    d = th - gth
    ca, sa = ad.abs(ad.cos(d)), ad.abs(ad.sin(d))
    wp = w * ca + h * sa
    hp = w * sa + h * ca
    cg, sg = np.cos(gth), np.sin(gth)
    dx, dy = cx - gcx, cy - gcy
    u = dx * cg + dy * sg
    v = dy * cg - dx * sg
    iw = ad.relu(ad.minimum(u + 0.5 * wp, 0.5 * gw) - ad.maximum(u - 0.5 * wp, -0.5 * gw))
    ih = ad.relu(ad.minimum(v + 0.5 * hp, 0.5 * gh) - ad.maximum(v - 0.5 * hp, -0.5 * gh))
    inter = iw * ih
    union = wp * hp + gw * gh - inter
    return inter / union


def circum_iou_loss(pred, gt, reduction: str = "mean") -> ad.Tensor:
    """``-ln IoU(B_proj, B_gt)`` where ``B_proj`` is ``pred`` circumscribed in gt's frame."""
    iou = framed_iou(pred, gt)
    loss = -ad.log(ad.maximum(iou, IOU_FLOOR))
    return _reduce(loss, reduction)


def hbox_iou_loss(pred, gt, reduction: str = "mean") -> ad.Tensor:
    """IoU loss after converting both boxes to their circumscribed HBoxes (ablation)."""
    g = np.atleast_2d(_as_box_array(gt)).copy()
    c, s = np.abs(np.cos(g[:, 4])), np.abs(np.sin(g[:, 4]))
    g[:, 2], g[:, 3] = g[:, 2] * c + g[:, 3] * s, g[:, 2] * s + g[:, 3] * c
    g[:, 4] = 0.0
    if np.ndim(_as_box_array(gt)) == 1:
        g = g[0]
    iou = framed_iou(pred, g)
    loss = -ad.log(ad.maximum(iou, IOU_FLOOR))
    return _reduce(loss, reduction)


def _reduce(t: ad.Tensor, reduction: str) -> ad.Tensor:
    if reduction == "mean":
        return ad.mean(t) if t.size else ad.Tensor(0.0)
    if reduction == "sum":
        return ad.sum(t)
    if reduction == "none":
        return t
    raise InvalidArgumentError(f"unknown reduction {reduction!r}")


def focal_loss(logits, labels, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> ad.Tensor:
    """Summed sigmoid focal loss."""
    logits = ad.as_tensor(logits)
    y = np.asarray(labels, dtype=np.float64)
    p = ad.sigmoid(logits)
    pos = alpha * y * ad.power(1.0 - p, gamma) * ad.softplus(-logits)
    neg = (1.0 - alpha) * (1.0 - y) * ad.power(p, gamma) * ad.softplus(logits)
    return ad.sum(pos + neg)


def bce_with_logits(logits, targets) -> ad.Tensor:
    """Elementwise binary cross-entropy against soft targets."""
    logits = ad.as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    return y * ad.softplus(-logits) + (1.0 - y) * ad.softplus(logits)


@dataclass
class WSTargets:
    """Dense targets for one view.

    ``labels`` covers every location; ``centerness`` and ``boxes`` are aligned with
    the positive locations, in the order the caller gathered the predictions.
    """
    labels: np.ndarray
    centerness: np.ndarray
    boxes: np.ndarray

    @property
    def num_pos(self) -> int:
        return int(len(self.centerness))


def ws_loss(cls_logits, cn_logits, box_preds, targets: WSTargets, weights: LossWeights = LossWeights(),
            box_loss: str = "circum_iou", return_parts: bool = False):
    """``L_cls + mu_cn * L_cn + mu_box * L_box`` for a single-class dense head."""
    num_pos = targets.num_pos
    l_cls = focal_loss(cls_logits, targets.labels) * (1.0 / max(num_pos, 1))
    if num_pos:
        l_cn = ad.mean(bce_with_logits(cn_logits, targets.centerness))
        if box_loss == "circum_iou":
            per_box = circum_iou_loss(box_preds, targets.boxes, reduction="none")
        elif box_loss == "hbox_iou":
            per_box = hbox_iou_loss(box_preds, targets.boxes, reduction="none")
        else:
            raise InvalidArgumentError(f"unknown box loss {box_loss!r}")
        cw = np.asarray(targets.centerness, dtype=np.float64)
        l_box = ad.mean(per_box * cw)
    else:
        l_cn = ad.Tensor(0.0)
        l_box = ad.Tensor(0.0)
    total = l_cls + weights.mu_cn * l_cn + weights.mu_box * l_box
    if return_parts:
        return total, {"cls": l_cls, "cn": l_cn, "box": l_box}
    return total


def total_loss(ws, ss, weights: LossWeights = LossWeights()) -> ad.Tensor:
    return ad.as_tensor(ws) + weights.mu_ss * ad.as_tensor(ss)
