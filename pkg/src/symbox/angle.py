"""Period-pi angle utilities: the phase-shifting coder and snap distances.

The coder maps an orientation onto ``N`` phase-shifted cosines of the doubled
angle, so ``theta`` and ``theta + pi`` share one code and the code is continuous
across the ``+-pi/2`` boundary.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import DegenerateCodeError, InvalidArgumentError
from .geometry import HALF_PI, wrap_half_pi

DEFAULT_STEPS = 3
_DEGENERATE = 1e-12
# atan2 rounding can land a hair below pi/2; treat that as the wrap point
_WRAP_TOL = 1e-12


def phase_offsets(n_steps: int = DEFAULT_STEPS) -> np.ndarray:
    if n_steps < 3:
        raise InvalidArgumentError(f"phase-shifting coder needs N >= 3, got {n_steps}")
    return 2.0 * math.pi * np.arange(n_steps) / n_steps


def encode(theta, n_steps: int = DEFAULT_STEPS) -> np.ndarray:
    """Code vector(s) ``cos(2 theta + 2 pi n / N)``; a trailing axis of length N is added."""
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise InvalidArgumentError("encode needs finite angles")
    return np.cos(2.0 * theta[..., None] + phase_offsets(n_steps))


def decode_components(code) -> tuple[np.ndarray, np.ndarray]:
    """Return the (sin-accumulator, cos-accumulator) pair fed to atan2."""
    code = np.asarray(code, dtype=np.float64)
    phi = phase_offsets(code.shape[-1])
    y = -(code * np.sin(phi)).sum(axis=-1)
    x = (code * np.cos(phi)).sum(axis=-1)
    return y, x


def decode(code):
    """Angle in ``[-pi/2, pi/2)`` for a code vector (or a stack along the last axis)."""
    y, x = decode_components(code)
    if np.any((np.abs(y) < _DEGENERATE) & (np.abs(x) < _DEGENERATE)):
        raise DegenerateCodeError("cannot decode an all-zero phase accumulator", op="decode")
    theta = 0.5 * np.arctan2(y, x)
    theta = np.where(theta >= HALF_PI - _WRAP_TOL, theta - math.pi, theta)
    if theta.ndim == 0:
        return float(theta)
    return theta


def snap_shift(pred: float, target: float) -> float:
    """The ``k * pi + target`` closest to ``pred``; ties go to the positive residual."""
    k0 = math.floor((pred - target) / math.pi + 0.5)
    best_res, best_shift = None, None
    for k in (k0 - 1, k0, k0 + 1):
        shift = k * math.pi + target
        r = pred - shift
        if best_res is None or abs(r) < abs(best_res) or (abs(r) == abs(best_res) and r > best_res):
            best_res, best_shift = r, shift
    return best_shift


def snap_distance(pred: float, target: float) -> float:
    """``pred - (k pi + target)`` for the k minimising its magnitude; in ``(-pi/2, pi/2]``."""
    if not (math.isfinite(pred) and math.isfinite(target)):
        raise InvalidArgumentError("snap_distance needs finite inputs")
    return pred - snap_shift(pred, target)


def snap_shift_array(pred, target) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.broadcast_to(np.asarray(target, dtype=np.float64), pred.shape)
    out = np.empty(pred.shape)
    for idx in np.ndindex(pred.shape):
        out[idx] = snap_shift(float(pred[idx]), float(target[idx]))
    return out


def angle_error_deg(pred: float, gt_sym: float) -> float:
    """Orientation error accepting the perpendicular axis, in degrees within [0, 45]."""
    d = (pred - gt_sym) % HALF_PI
    d = min(d, HALF_PI - d)
    return math.degrees(abs(d))


__all__ = [
    "DEFAULT_STEPS",
    "angle_error_deg",
    "decode",
    "decode_components",
    "encode",
    "phase_offsets",
    "snap_distance",
    "snap_shift",
    "snap_shift_array",
    "wrap_half_pi",
]
