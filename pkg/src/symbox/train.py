"""Two-branch training: a tiny shared-weight detector, the cross-view assigner,
SS + WS loss assembly, an Adam optimizer, single-view inference and checkpoints.
"""
from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import views
from .angle import decode as decode_np
from .errors import ConfigError, DatasetFormatError, InvalidArgumentError, NumericError, VersionMismatchError
from .geometry import OrientedBox, canonicalize, nms_rotated, point_in_box
from .losses import (LossWeights, WSTargets, circum_iou_loss, decode_angle, flip_consistency_loss,
                     framed_iou, hbox_iou_loss, rotate_consistency_loss, ss_loss, total_loss, ws_loss)

logger = logging.getLogger(__name__)

STRIDE = 4
CLS_PRIOR = 0.01
CKPT_MAGIC = b"SYMBOXCK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    rotation_range: tuple = (math.pi / 4, 3 * math.pi / 4)
    padding: str = "reflection"
    coder: str = "psc"
    psc_steps: int = 3
    box_loss: str = "circum_iou"
    lr: float = 5e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    warmup_steps: int = 100
    lr_decay_at: tuple = (0.75, 0.9)
    steps: int = 2000
    batch_size: int = 2
    grad_clip: float = 35.0
    center_radius: float = 1.5
    ss_only: bool = False
    rr_augment: bool = False
    rr_range: tuple = (-math.pi, math.pi)
    multiplex: bool = False
    width: int = 32
    val_limit: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.coder not in ("psc", "none"):
            raise InvalidArgumentError(f"coder must be 'psc' or 'none', got {self.coder!r}")
        if self.box_loss not in ("circum_iou", "hbox_iou"):
            raise InvalidArgumentError(f"box_loss must be 'circum_iou' or 'hbox_iou', got {self.box_loss!r}")
        if self.padding not in views.PADDINGS:
            raise InvalidArgumentError(f"unknown padding {self.padding!r}")
        if self.psc_steps < 3:
            raise InvalidArgumentError("psc_steps must be >= 3")
        if self.steps < 1 or self.batch_size < 1:
            raise InvalidArgumentError("steps and batch_size must be positive")

    @property
    def effective_weights(self) -> LossWeights:
        if self.ss_only:
            return replace(self.weights, mu_cn=0.0, mu_box=0.0)
        return self.weights

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rotation_range"] = list(self.rotation_range)
        d["betas"] = list(self.betas)
        d["lr_decay_at"] = list(self.lr_decay_at)
        d["rr_range"] = list(self.rr_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            wk = {f.name for f in fields(LossWeights)}
            bad = set(d["weights"]) - wk
            if bad:
                raise ConfigError(f"unknown loss weight keys: {sorted(bad)}")
            d["weights"] = LossWeights(**d["weights"])
        for k in ("rotation_range", "betas", "lr_decay_at", "rr_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# ---------------------------------------------------------------- model

class TinyModel:
    """Stem, two stride-2 blocks and a stride-8 context branch feeding 3x3 heads on the stride-4 map.

    Box offsets and center-ness sit on a small regression tower of their own.
    One parameter set serves every view.
    """

    # name -> (stride); block 1 is a single stride-2 conv, block 2 a stride-2 conv
    # followed by two stride-1 convs on the cheap stride-4 map to widen the receptive field
    LAYERS = (("stem", 1), ("b1", 2), ("b2a", 2), ("b2b", 1), ("b2c", 1))
    # stride-8 branch, upsampled and added back so head cells see whole objects
    CONTEXT = (("b3a", 2), ("b3b", 1))
    REG_TOWER = ("r1", "r2")

    def __init__(self, angle_channels: int = 3, width: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        c0 = width // 2
        shapes = {
            "stem": (c0, 1), "b1": (width, c0),
            "b2a": (width, width), "b2b": (width, width), "b2c": (width, width),
            "b3a": (width, width), "b3b": (width, width),
            "r1": (width, width), "r2": (width, width),
        }
        self.params: dict[str, ad.Tensor] = {}
        for name, (o, i) in shapes.items():
            self.params[f"{name}.w"] = ad.Tensor(rng.normal(0, math.sqrt(2.0 / (9 * i)), (o, i, 3, 3)), True)
            self.params[f"{name}.b"] = ad.Tensor(np.zeros(o), True)
        for name, o in (("angle", angle_channels), ("cls", 1), ("box", 4), ("cn", 1)):
            self.params[f"{name}.w"] = ad.Tensor(rng.normal(0, 0.01, (o, width, 3, 3)), True)
            self.params[f"{name}.b"] = ad.Tensor(np.zeros(o), True)
        self.params["cls.b"].data[0] = -math.log((1 - CLS_PRIOR) / CLS_PRIOR)
        self.params["box.b"].data[:] = math.log(2.0)
        self.angle_channels = angle_channels
        self.width = width
        self.forward_calls = 0

    def parameters(self) -> list:
        return list(self.params.values())

    def forward(self, images: np.ndarray, dense: bool = True) -> dict:
        """``images`` is (B, H, W); returns head maps on the stride-4 grid.

        With ``dense=False`` only the angle code is computed (enough for the SS views).
        """
        self.forward_calls += 1
        p = self.params
        x = ad.Tensor(np.asarray(images, dtype=np.float64)[:, None])
        for name, stride in self.LAYERS:
            x = ad.relu(ad.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride))
        ctx = x
        for name, stride in self.CONTEXT:
            ctx = ad.relu(ad.conv2d(ctx, p[f"{name}.w"], p[f"{name}.b"], stride=stride))
        x = x + ad.upsample2(ctx)
        code = ad.conv2d(x, p["angle.w"], p["angle.b"])
        if not dense:
            return {"code": code}
        cls = ad.conv2d(x, p["cls.w"], p["cls.b"])
        reg = x
        for name in self.REG_TOWER:
            reg = ad.relu(ad.conv2d(reg, p[f"{name}.w"], p[f"{name}.b"]))
        box = ad.exp(ad.minimum(ad.conv2d(reg, p["box.w"], p["box.b"]), 8.0)) * float(STRIDE)
        cn = ad.conv2d(reg, p["cn.w"], p["cn.b"])
        return {"code": code, "box": box, "cls": cls[:, 0], "cn": cn[:, 0]}

    def state_arrays(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict):
        missing = set(self.params) - set(arrays)
        if missing:
            raise VersionMismatchError(f"checkpoint lacks tensors {sorted(missing)}")
        for k, v in arrays.items():
            if k not in self.params or self.params[k].shape != v.shape:
                raise VersionMismatchError(f"checkpoint tensor {k} does not fit this model")
            self.params[k].data = np.array(v, dtype=np.float64)


def grid_points(size: tuple, stride: int = STRIDE) -> np.ndarray:
    """Image-space centers of feature cells, flattened row-major as (h*w, 2) of (x, y)."""
    h, w = size[0] // stride, size[1] // stride
    ys, xs = np.mgrid[0:h, 0:w]
    off = 0.5 * (stride - 1)
    return np.stack([xs.reshape(-1) * stride + off, ys.reshape(-1) * stride + off], axis=1).astype(np.float64)


def flat_maps(t: ad.Tensor) -> ad.Tensor:
    """(B, C, h, w) -> (B*h*w, C)."""
    b, c, h, w = t.shape
    return t.transpose(0, 2, 3, 1).reshape(b * h * w, c)


def decode_codes(code: np.ndarray, coder: str) -> np.ndarray:
    if coder == "none":
        return code[..., 0]
    return decode_np(code)


def code_to_angle(code, coder: str) -> ad.Tensor:
    if coder == "none":
        return ad.as_tensor(code)[..., 0]
    return decode_angle(code)


# ---------------------------------------------------------------- optimizer

class Adam:
    """Bias-corrected Adam with linear warm-up and step decay (x0.1 at each milestone)."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, warmup_steps=0, milestones=(), total_steps=1):
        self.params = list(params)
        self.base_lr, self.betas, self.eps = lr, betas, eps
        self.warmup_steps = warmup_steps
        self.milestones = [int(m * total_steps) for m in milestones]
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def lr_at(self, t: int) -> float:
        lr = self.base_lr
        for m in self.milestones:
            if t > m:
                lr *= 0.1
        if self.warmup_steps and t <= self.warmup_steps:
            lr *= t / self.warmup_steps
        return lr

    def step(self, grads: list):
        self.t += 1
        lr = self.lr_at(self.t)
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{i}"], out[f"adam.v.{i}"] = m, v
        return out


# ---------------------------------------------------------------- assignment

@dataclass
class ViewSet:
    """One scene with its three views and the transforms that made them."""
    images: dict
    transforms: dict
    gt_boxes: list          # WS ground truth (RBoxes) in the original view
    centers: np.ndarray     # (n_obj, 2) object centers in the original view
    shape_kinds: list


@dataclass
class AssignedBatch:
    labels: np.ndarray                 # (B*h*w,) 0/1 classification targets, original view
    pos_index: np.ndarray              # flat indices of positives
    pos_boxes: np.ndarray              # (P, 5) B_gt per positive
    pos_centerness: np.ndarray         # (P,)
    ss_weights: dict                   # view -> (n_obj, B*h*w) averaging matrix
    ss_rotation: np.ndarray            # (n_matched,) rotation per matched object
    matched: np.ndarray                # indices into the batch's object list
    n_objects: int


def build_views(scene, rng: np.random.Generator, config: TrainConfig) -> ViewSet:
    img = scene.image
    size = img.shape
    if size[0] != size[1]:
        img = views.center_crop_square(img)
        size = img.shape
    gt = [o.hbox.to_oriented() for o in scene.objects]
    if config.rr_augment:
        aug = views.ViewTransform("rotate", float(rng.uniform(*config.rr_range)), config.padding)
        img = views.apply(img, aug)
        gt = [views.transform_rbox(b, aug, size) for b in gt]
        keep = [i for i, b in enumerate(gt) if views.inside_image((b.cx, b.cy), size)]
        gt = [gt[i] for i in keep]
        kinds = [scene.objects[i].shape_kind for i in keep]
    else:
        kinds = [o.shape_kind for o in scene.objects]
    R = views.sample_rotation(rng, config.rotation_range)
    tf = {
        "orig": views.ViewTransform("identity"),
        "flp": views.ViewTransform("vflip"),
        "rot": views.ViewTransform("rotate", R, config.padding),
    }
    imgs = {k: views.apply(img, t) for k, t in tf.items()}
    centers = np.array([[b.cx, b.cy] for b in gt]).reshape(-1, 2)
    return ViewSet(imgs, tf, gt, centers, kinds)


def centerness_target(box: OrientedBox, pts: np.ndarray) -> np.ndarray:
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx, dy = pts[:, 0] - box.cx, pts[:, 1] - box.cy
    u, v = dx * c + dy * s, -dx * s + dy * c
    l, r = 0.5 * box.w + u, 0.5 * box.w - u
    t, b = 0.5 * box.h + v, 0.5 * box.h - v
    lr = np.clip(np.minimum(l, r), 1e-9, None) / np.clip(np.maximum(l, r), 1e-9, None)
    tb = np.clip(np.minimum(t, b), 1e-9, None) / np.clip(np.maximum(t, b), 1e-9, None)
    return np.sqrt(lr * tb)


def assign(viewsets: list, size: tuple, config: TrainConfig, rng: np.random.Generator | None = None) -> AssignedBatch:
    """FCOS-style positives on the original view plus SS sample sets in all three views."""
    pts = grid_points(size)
    npts = len(pts)
    radius = config.center_radius * STRIDE
    labels = np.zeros(len(viewsets) * npts)
    pos_index, pos_boxes, pos_cn = [], [], []
    rows = {"orig": [], "flp": [], "rot": []}
    rotation, matched = [], []
    obj_id = 0
    for b, vs in enumerate(viewsets):
        best_area = np.full(npts, np.inf)
        owner = np.full(npts, -1)
        for i, box in enumerate(vs.gt_boxes):
            near = np.hypot(pts[:, 0] - box.cx, pts[:, 1] - box.cy) <= radius
            inside = point_in_box(box, pts[:, 0], pts[:, 1]) & near & (box.area < best_area)
            owner[inside] = i
            best_area[inside] = box.area
        for j in np.flatnonzero(owner >= 0):
            box = vs.gt_boxes[owner[j]]
            pos_index.append(b * npts + j)
            pos_boxes.append(box.as_array())
            pos_cn.append(centerness_target(box, pts[j:j + 1])[0])
        labels[b * npts + np.flatnonzero(owner >= 0)] = 1.0
        for i in range(len(vs.gt_boxes)):
            c = tuple(vs.centers[i])
            ok = True
            sample = {}
            for name, t in vs.transforms.items():
                q = views.transform_point(c, t, size)
                if not views.inside_image(q, size):
                    ok = False
                    break
                idx = np.flatnonzero(np.hypot(pts[:, 0] - q[0], pts[:, 1] - q[1]) <= radius)
                if len(idx) == 0:
                    ok = False
                    break
                sample[name] = b * npts + idx
            if ok:
                for name, idx in sample.items():
                    rows[name].append(idx)
                rotation.append(vs.transforms["rot"].R)
                matched.append(obj_id)
            obj_id += 1
    total = len(viewsets) * npts
    weights = {}
    for name, lst in rows.items():
        m = np.zeros((len(lst), total))
        for r, idx in enumerate(lst):
            m[r, idx] = 1.0 / len(idx)
        weights[name] = m
    return AssignedBatch(
        labels=labels,
        pos_index=np.array(pos_index, dtype=np.int64),
        pos_boxes=np.array(pos_boxes).reshape(-1, 5),
        pos_centerness=np.array(pos_cn),
        ss_weights=weights,
        ss_rotation=np.array(rotation),
        matched=np.array(matched, dtype=np.int64),
        n_objects=obj_id,
    )


def object_angles(code_map: ad.Tensor, weights: np.ndarray, coder: str) -> ad.Tensor:
    """Average the code over each object's sample points, then decode once."""
    flat = flat_maps(code_map)
    avg = ad.matmul(ad.Tensor(weights), flat)
    return code_to_angle(avg, coder)


def decode_boxes(box_flat: ad.Tensor, theta: np.ndarray, pts: np.ndarray) -> ad.Tensor:
    """Offsets (l, t, r, b) in the frame of ``theta`` -> (P, 5) box tensor; angle enters as a constant."""
    l, t, r, b = (box_flat[:, i] for i in range(4))
    c, s = np.cos(theta), np.sin(theta)
    du, dv = 0.5 * (r - l), 0.5 * (b - t)
    cx = pts[:, 0] + du * c - dv * s
    cy = pts[:, 1] + du * s + dv * c
    return ad.stack([cx, cy, l + r, t + b, ad.Tensor(theta)], axis=1)


# ---------------------------------------------------------------- training

@dataclass
class StepResult:
    total: float
    parts: dict
    clamped: int = 0


def _check_finite(parts: dict, step: int):
    for name, v in parts.items():
        if not math.isfinite(v):
            raise NumericError(f"non-finite loss term {name} at step {step}", op=name, step=step)


def train_step(scenes: list, model: TinyModel, optimizer: Adam, config: TrainConfig,
               rng: np.random.Generator, step: int = 0) -> StepResult:
    """One optimisation step on a batch of scenes."""
    vsets = [build_views(s, rng, config) for s in scenes]
    size = vsets[0].images["orig"].shape
    batch = assign(vsets, size, config)
    w = config.effective_weights
    use_flip, use_rot = True, True
    if config.multiplex:
        p_flip = w.lambda_flp / (1.0 + w.lambda_flp)
        use_flip = bool(rng.random() < p_flip)
        use_rot = not use_flip

    outs = {}
    for name in ("orig", "flp", "rot"):
        if name == "flp" and not use_flip or name == "rot" and not use_rot:
            continue
        outs[name] = model.forward(np.stack([vs.images[name] for vs in vsets]), dense=name == "orig")

    # SS branch
    if len(batch.matched) and w.mu_ss > 0:
        theta = object_angles(outs["orig"]["code"], batch.ss_weights["orig"], config.coder)
        if config.multiplex:
            if use_flip:
                th_f = object_angles(outs["flp"]["code"], batch.ss_weights["flp"], config.coder)
                l_flp = ad.mean(flip_consistency_loss(theta, th_f, w.smooth_l1_beta))
                l_rot = ad.Tensor(0.0)
                l_ss = l_flp
            else:
                th_r = object_angles(outs["rot"]["code"], batch.ss_weights["rot"], config.coder)
                l_rot = ad.mean(rotate_consistency_loss(theta, th_r, batch.ss_rotation, w.smooth_l1_beta))
                l_flp = ad.Tensor(0.0)
                l_ss = l_rot
        else:
            th_f = object_angles(outs["flp"]["code"], batch.ss_weights["flp"], config.coder)
            th_r = object_angles(outs["rot"]["code"], batch.ss_weights["rot"], config.coder)
            l_ss, ss_parts = ss_loss(theta, th_f, th_r, batch.ss_rotation, w, return_parts=True)
            l_flp, l_rot = ss_parts["flp"], ss_parts["rot"]
    else:
        l_ss = l_flp = l_rot = ad.Tensor(0.0)

    # WS branch, original view only
    o = outs["orig"]
    cls_flat = o["cls"].reshape(-1)
    pts_all = np.tile(grid_points(size), (len(vsets), 1))
    clamped = 0
    if len(batch.pos_index):
        idx = batch.pos_index
        cn_pos = o["cn"].reshape(-1)[idx]
        code_flat = flat_maps(o["code"]).data[idx]
        theta_pos = decode_codes(code_flat, config.coder)
        box_flat = flat_maps(o["box"])[idx]
        boxes = decode_boxes(box_flat, theta_pos, pts_all[idx])
    else:
        cn_pos = ad.Tensor(np.zeros(0))
        boxes = ad.Tensor(np.zeros((0, 5)))
    targets = WSTargets(batch.labels, batch.pos_centerness, batch.pos_boxes)
    l_ws, ws_parts = ws_loss(cls_flat, cn_pos, boxes, targets, w, box_loss=config.box_loss, return_parts=True)
    if len(batch.pos_index):
        clamped = int(np.sum(framed_iou(ad.Tensor(boxes.data), batch.pos_boxes).data < 1e-6))
    loss = total_loss(l_ws, l_ss, w)
    parts = {"flp": l_flp.item(), "rot": l_rot.item(), "cls": ws_parts["cls"].item(),
             "cn": ws_parts["cn"].item(), "box": ws_parts["box"].item(), "total": loss.item()}
    _check_finite(parts, step)

    params = model.parameters()
    for p in params:
        p.grad = None
    ad.backward(loss)
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if not math.isfinite(norm):
        raise NumericError(f"non-finite gradient at step {step}", op="backward", step=step)
    if config.grad_clip and norm > config.grad_clip:
        grads = [g * (config.grad_clip / norm) for g in grads]
    optimizer.step(grads)
    return StepResult(loss.item(), parts, clamped)


def measure_box_loss(model: TinyModel, scenes: list, config: TrainConfig, box_loss: str = "circum_iou",
                     seed: int = 0, batch_size: int = 8) -> float:
    """Center-ness weighted box loss of a trained model over ``scenes``.

    Views (and the random-rotation augmentation, if enabled in ``config``) are drawn
    from ``seed`` so two models can be compared on identical targets. ``box_loss``
    picks the metric independently of the loss the model was trained with.
    """
    rng = np.random.default_rng(seed)
    num, count = 0.0, 0
    for start in range(0, len(scenes), batch_size):
        vsets = [build_views(s, rng, config) for s in scenes[start:start + batch_size]]
        size = vsets[0].images["orig"].shape
        batch = assign(vsets, size, config)
        if not len(batch.pos_index):
            continue
        out = model.forward(np.stack([vs.images["orig"] for vs in vsets]))
        idx = batch.pos_index
        pts = np.tile(grid_points(size), (len(vsets), 1))[idx]
        theta = decode_codes(flat_maps(out["code"]).data[idx], config.coder)
        boxes = decode_boxes(ad.Tensor(flat_maps(out["box"]).data[idx]), theta, pts)
        fn = circum_iou_loss if box_loss == "circum_iou" else hbox_iou_loss
        per = fn(boxes, batch.pos_boxes, reduction="none").data
        num += float(np.sum(per * batch.pos_centerness))
        count += len(idx)
    return num / count if count else float("nan")


@dataclass
class TrainResult:
    model: TinyModel
    history: list           # per-epoch dict rows
    step_losses: list       # per-step total loss
    wall_time: float
    unstable: bool = False


CSV_COLUMNS = ("epoch", "step", "L_flp", "L_rot", "L_cls", "L_cn", "L_box", "L_total",
               "val_median_angle_err_deg", "val_ap50", "clamped")


def train(train_scenes: list, config: TrainConfig, val_scenes: list | None = None,
          on_epoch=None, log_every: int = 0) -> TrainResult:
    """Run ``config.steps`` optimisation steps; one epoch is one pass over ``train_scenes``."""
    from .evaluate import evaluate_model

    if not train_scenes:
        raise InvalidArgumentError("empty training set")
    rng = np.random.default_rng(config.seed)
    n_code = config.psc_steps if config.coder == "psc" else 1
    model = TinyModel(n_code, config.width, seed=config.seed)
    opt = Adam(model.parameters(), config.lr, config.betas, config.adam_eps,
               config.warmup_steps, config.lr_decay_at, config.steps)
    steps_per_epoch = max(1, math.ceil(len(train_scenes) / config.batch_size))
    history, step_losses = [], []
    acc, clamped = [], 0
    order = rng.permutation(len(train_scenes))
    cursor = 0
    t0 = time.perf_counter()
    for step in range(1, config.steps + 1):
        if cursor + config.batch_size > len(order):
            order = rng.permutation(len(train_scenes))
            cursor = 0
        picks = order[cursor:cursor + config.batch_size]
        cursor += config.batch_size
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                res = train_step([train_scenes[i] for i in picks], model, opt, config, rng, step)
        except NumericError as exc:
            if exc.step is None:
                exc.step = step
            raise
        step_losses.append(res.total)
        acc.append(res.parts)
        clamped += res.clamped
        if log_every and step % log_every == 0:
            logger.info("step %d loss %.4f %s", step, res.total,
                        " ".join(f"{k}={v:.4f}" for k, v in res.parts.items()))
        if step % steps_per_epoch == 0 or step == config.steps:
            row = {"epoch": len(history) + 1, "step": step}
            for key, col in (("flp", "L_flp"), ("rot", "L_rot"), ("cls", "L_cls"), ("cn", "L_cn"),
                             ("box", "L_box"), ("total", "L_total")):
                row[col] = float(np.mean([a[key] for a in acc]))
            row["clamped"] = clamped
            if val_scenes:
                rep = evaluate_model(model, val_scenes[:config.val_limit], config.coder)
                row["val_median_angle_err_deg"] = rep.median_angle_err_deg
                row["val_ap50"] = rep.ap50
            else:
                row["val_median_angle_err_deg"] = float("nan")
                row["val_ap50"] = float("nan")
            history.append(row)
            if on_epoch:
                on_epoch(row)
            acc, clamped = [], 0
    return TrainResult(model, history, step_losses, time.perf_counter() - t0, detect_instability(step_losses))


def detect_instability(step_losses: list, window: int = 100) -> bool:
    """Flag runs whose late loss climbs well above its best smoothed level."""
    if len(step_losses) < 2 * window:
        return False
    x = np.asarray(step_losses)
    smooth = np.convolve(x, np.ones(window) / window, mode="valid")
    return bool(smooth[-1] > 1.5 * smooth.min() + 0.05)


# ---------------------------------------------------------------- inference

def detections_from_maps(out: dict, size: tuple, score_threshold: float = 0.3, nms_iou: float = 0.5,
                         coder: str = "psc", top_k: int = 100, batch_index: int = 0) -> list:
    """Decode one image's head maps into NMS-filtered ``[(OrientedBox, score), ...]``."""
    pts = grid_points(size)
    npts = len(pts)
    sl = slice(batch_index * npts, (batch_index + 1) * npts)
    cls = 1.0 / (1.0 + np.exp(-out["cls"].data.reshape(-1)[sl]))
    cn = 1.0 / (1.0 + np.exp(-out["cn"].data.reshape(-1)[sl]))
    score = np.sqrt(cls * cn)
    keep = np.flatnonzero(score >= score_threshold)
    if len(keep) == 0:
        return []
    keep = keep[np.argsort(-score[keep], kind="stable")][:top_k]
    code = flat_maps(out["code"]).data[sl][keep]
    theta = decode_codes(code, coder)
    offs = flat_maps(out["box"]).data[sl][keep]
    boxes = decode_boxes(ad.Tensor(offs), theta, pts[keep]).data
    cand = [canonicalize(OrientedBox(*b)) for b in boxes]
    kept = nms_rotated(cand, score[keep], nms_iou)
    return [(cand[i], float(score[keep][i])) for i in kept]


def readout_from_maps(out: dict, size: tuple, centers, coder: str = "psc",
                      radius: float = 1.5 * STRIDE, batch_index: int = 0) -> np.ndarray:
    """Per-object angle: the angle head averaged around each center, decoded once."""
    pts = grid_points(size)
    npts = len(pts)
    code = flat_maps(out["code"]).data[batch_index * npts:(batch_index + 1) * npts]
    res = []
    for c in np.asarray(centers, dtype=np.float64).reshape(-1, 2):
        d = np.hypot(pts[:, 0] - c[0], pts[:, 1] - c[1])
        idx = np.flatnonzero(d <= radius)
        if len(idx) == 0:
            idx = np.array([int(np.argmin(d))])
        res.append(float(decode_codes(code[idx].mean(axis=0), coder)))
    return np.array(res)


def infer(image: np.ndarray, model: TinyModel, score_threshold: float = 0.3, nms_iou: float = 0.5,
          coder: str = "psc", top_k: int = 100) -> list:
    """Single forward pass on one image; returns ``[(OrientedBox, score), ...]``.

    No flipped or rotated views are built here: only the angle decode is added
    on top of a plain dense detector.
    """
    image = np.asarray(image, dtype=np.float64)
    out = model.forward(image[None])
    return detections_from_maps(out, image.shape, score_threshold, nms_iou, coder, top_k)


def readout_angles(model: TinyModel, image: np.ndarray, centers, coder: str = "psc") -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return readout_from_maps(model.forward(image[None]), image.shape, centers, coder)


# ---------------------------------------------------------------- checkpoints
# header: magic(8) version(u32) n_tensors(u32) meta_len(u32) meta_json
# per tensor: name_len(u16) name ndim(u8) dims(u32 * ndim) data(<f8)

def save_checkpoint(path, model: TinyModel, config: TrainConfig, extra: dict | None = None):
    meta = json.dumps({"config": config.to_dict(), "angle_channels": model.angle_channels,
                       "width": model.width, **(extra or {})}).encode()
    arrays = model.state_arrays()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<III", CKPT_VERSION, len(arrays), len(meta)) + meta)
        for name, a in arrays.items():
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[TinyModel, TrainConfig, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise DatasetFormatError(f"{path}: not a symbox checkpoint")
    version, n, mlen = struct.unpack_from("<III", data, 8)
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    off = 20
    meta = json.loads(data[off:off + mlen])
    off += mlen
    arrays = {}
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + ln].decode()
            off += ln
            (nd,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{nd}I", data, off)
            off += 4 * nd
            cnt = int(np.prod(shape)) if nd else 1
            if off + 8 * cnt > len(data):
                raise struct.error("tensor data truncated")
            arrays[name] = np.frombuffer(data, dtype="<f8", count=cnt, offset=off).reshape(shape).astype(np.float64)
            off += 8 * cnt
    except struct.error as exc:
        raise DatasetFormatError(f"{path}: truncated checkpoint") from exc
    config = TrainConfig.from_dict(meta["config"])
    model = TinyModel(meta["angle_channels"], meta["width"])
    model.load_arrays(arrays)
    return model, config, meta
