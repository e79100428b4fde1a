"""Finite-difference gradient suite over every training loss.

Each case draws a random point away from the loss's kinks (smooth-L1 knee, the
snap branch switch, IoU clamp and min/max ties) and returns ``(f, x)`` where
``f`` maps a flat Tensor to a scalar loss.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .losses import (
    LossWeights,
    WSTargets,
    circum_iou_loss,
    flip_consistency_loss,
    rotate_consistency_loss,
    snap_loss,
    ss_loss,
    total_loss,
    ws_loss,
)

TOLERANCE = 1e-3
MARGIN = 0.05


def _residual(rng, n):
    """Residuals whose magnitude stays clear of 0-crossings, the knee at 1 and pi/2."""
    mag = np.where(rng.random(n) < 0.5, rng.uniform(MARGIN, 1 - MARGIN, n),
                   rng.uniform(1 + MARGIN, math.pi / 2 - MARGIN, n))
    return mag * rng.choice([-1.0, 1.0], n)


def snap_case(rng, n=3):
    t = rng.uniform(-3, 3, n)
    p = t + rng.integers(-2, 3, n) * math.pi + _residual(rng, n)
    return (lambda x: ad.sum(snap_loss(x, t))), p


def flip_case(rng, n=3):
    theta = rng.uniform(-1.5, 1.5, n)
    flp = -theta + rng.integers(-1, 2, n) * math.pi + _residual(rng, n)
    return (lambda x: ad.mean(flip_consistency_loss(x[:n], x[n:]))), np.concatenate([theta, flp])


def rot_case(rng, n=3):
    theta = rng.uniform(-1.5, 1.5, n)
    R = rng.uniform(math.pi / 4, 3 * math.pi / 4, n)
    rot = theta + R + rng.integers(-1, 2, n) * math.pi + _residual(rng, n)
    return (lambda x: ad.mean(rotate_consistency_loss(x[:n], x[n:], R))), np.concatenate([theta, rot])


def _ss_point(rng, n):
    theta = rng.uniform(-1.5, 1.5, n)
    R = rng.uniform(math.pi / 4, 3 * math.pi / 4, n)
    flp = -theta + _residual(rng, n)
    rot = theta + R + _residual(rng, n)
    return np.concatenate([theta, flp, rot]), R


def ss_case(rng, n=3):
    x, R = _ss_point(rng, n)
    w = LossWeights()
    return (lambda v: ss_loss(v[:n], v[n:2 * n], v[2 * n:], R, w)), x


def _clear(vals, margin) -> bool:
    return all(abs(v) > margin for v in vals)


def _box_pair(rng):
    """Overlapping pred/gt pair with every min/max in the framed IoU well separated."""
    while True:
        gt = np.array([*rng.uniform(-2, 2, 2), *rng.uniform(3, 8, 2), rng.uniform(-math.pi / 2, math.pi / 2)])
        pred = np.array([gt[0] + rng.normal(0, 1), gt[1] + rng.normal(0, 1), *rng.uniform(2, 8, 2),
                         gt[4] + rng.uniform(-1.4, 1.4)])
        d = pred[4] - gt[4]
        if min(abs(d - k * math.pi / 2) for k in range(-3, 4)) < 0.1:
            continue
        c, s = abs(math.cos(d)), abs(math.sin(d))
        wp, hp = pred[2] * c + pred[3] * s, pred[2] * s + pred[3] * c
        cg, sg = math.cos(gt[4]), math.sin(gt[4])
        dx, dy = pred[0] - gt[0], pred[1] - gt[1]
        u, v = dx * cg + dy * sg, dy * cg - dx * sg
        ties = [u + wp / 2 - gt[2] / 2, u - wp / 2 + gt[2] / 2, v + hp / 2 - gt[3] / 2, v - hp / 2 + gt[3] / 2]
        iw = min(u + wp / 2, gt[2] / 2) - max(u - wp / 2, -gt[2] / 2)
        ih = min(v + hp / 2, gt[3] / 2) - max(v - hp / 2, -gt[3] / 2)
        if _clear(ties, 0.1) and iw > 0.1 and ih > 0.1:
            return pred, gt


def circum_case(rng, n=2):
    pairs = [_box_pair(rng) for _ in range(n)]
    pred = np.stack([p for p, _ in pairs])
    gt = np.stack([g for _, g in pairs])
    return (lambda x: circum_iou_loss(x.reshape(n, 5), gt)), pred.reshape(-1)


def _ws_point(rng, n_loc=6, n_pos=2):
    pairs = [_box_pair(rng) for _ in range(n_pos)]
    labels = np.zeros(n_loc)
    labels[:n_pos] = 1.0
    targets = WSTargets(labels=labels, centerness=rng.uniform(0.2, 1.0, n_pos),
                        boxes=np.stack([g for _, g in pairs]))
    x = np.concatenate([rng.normal(0, 1.5, n_loc), rng.normal(0, 1.5, n_pos),
                        np.stack([p for p, _ in pairs]).reshape(-1)])
    return x, targets


def _ws_from_flat(x, targets, n_loc=6, n_pos=2):
    cls = x[:n_loc]
    cn = x[n_loc:n_loc + n_pos]
    box = x[n_loc + n_pos:].reshape(n_pos, 5)
    return ws_loss(cls, cn, box, targets)


def ws_case(rng):
    x, targets = _ws_point(rng)
    return (lambda v: _ws_from_flat(v, targets)), x


def total_case(rng, n=3):
    xw, targets = _ws_point(rng)
    xs, R = _ss_point(rng, n)
    k = len(xw)
    w = LossWeights()

    def f(v):
        ss = ss_loss(v[k:k + n], v[k + n:k + 2 * n], v[k + 2 * n:], R, w)
        return total_loss(_ws_from_flat(v[:k], targets), ss, w)
    return f, np.concatenate([xw, xs])


CASES = {
    "snap": snap_case,
    "L_flp": flip_case,
    "L_rot": rot_case,
    "L_ss": ss_case,
    "CircumIoU": circum_case,
    "L_ws": ws_case,
    "L_total": total_case,
}


def run_suite(points: int = 100, seed: int = 0, h: float = 1e-5) -> dict:
    """Worst relative error per loss over ``points`` random kink-free points."""
    rng = np.random.default_rng(seed)
    worst = {}
    for name, case in CASES.items():
        err = 0.0
        for _ in range(points):
            f, x = case(rng)
            err = max(err, ad.grad_check(f, x, h))
        worst[name] = err
    return worst
