"""Ablation grid: one training run per variant, summarised in a single report.

A variant is a set of overrides on top of a base ``RunConfig``: train-config
fields, loss weights, or data options (annotation noise, train sampling).
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .config import RunConfig
from .evaluate import evaluate_model
from .synth import noisy_dataset, sample_dataset
from .train import TrainConfig, measure_box_loss, train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    name: str
    description: str
    train: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    sample_pct: float | None = None
    noise_sigma: float | None = None
    step_scale: int = 1


VARIANTS = (
    Variant("default", "full method"),
    Variant("no_psc", "angle regressed without the phase-shift coder", {"coder": "none"}),
    Variant("lambda_0", "rotate consistency only", weights={"lambda_flp": 0.0}),
    Variant("lambda_1", "flip and rotate weighted equally", weights={"lambda_flp": 1.0}),
    Variant("range_full", "rotation drawn from [-pi, pi)", {"rotation_range": (-math.pi, math.pi)}),
    Variant("range_narrow", "rotation drawn from [7pi/16, 9pi/16]",
            {"rotation_range": (7 * math.pi / 16, 9 * math.pi / 16)}),
    Variant("pad_zeros", "zero padding in the rotated view", {"padding": "zeros"}),
    Variant("noise_0.1", "annotation noise sigma 0.1", noise_sigma=0.1),
    Variant("noise_0.3", "annotation noise sigma 0.3", noise_sigma=0.3),
    Variant("sample_10", "10% of the training split", sample_pct=10.0),
    Variant("sample_30", "30% of the training split", sample_pct=30.0),
    # rotated targets cover every orientation, so the box branch gets a 3x schedule to settle
    Variant("rr_circum", "random-rotation augmentation, CircumIoU box loss",
            {"rr_augment": True}, step_scale=3),
    Variant("rr_hbox", "random-rotation augmentation, HBox IoU box loss",
            {"rr_augment": True, "box_loss": "hbox_iou"}, step_scale=3),
)
VARIANTS_BY_NAME = {v.name: v for v in VARIANTS}

SWEEP_COLUMNS = ("variant", "description", "steps", "n_train", "ap50", "ap75", "median_angle_err_deg",
                 "mean_angle_err_deg", "final_L_box", "eval_L_box_circum", "unstable", "wall_time_s")


def variant_config(base: RunConfig, v: Variant) -> RunConfig:
    tr = base.train
    if v.weights:
        tr = replace(tr, weights=replace(tr.weights, **v.weights))
    if v.train:
        tr = replace(tr, **v.train)
    if v.step_scale != 1:
        tr = replace(tr, steps=tr.steps * v.step_scale)
    data = base.data
    if v.sample_pct is not None:
        data = replace(data, sample_pct=v.sample_pct)
    if v.noise_sigma is not None:
        data = replace(data, noise_sigma=v.noise_sigma)
    return replace(base, train=tr, data=data)


def prepare_train_split(train_scenes: list, config: RunConfig, seed: int) -> list:
    """Apply the config's annotation noise and sampling to a clean training split."""
    scenes = noisy_dataset(train_scenes, config.data.noise_sigma, seed)
    if config.data.sample_pct < 100:
        scenes = sample_dataset(scenes, config.data.sample_pct, seed)
    return scenes


def run_config(config: RunConfig, train_scenes: list, val_scenes: list, test_scenes: list,
               name: str = "run", description: str = "", on_epoch=None) -> dict:
    """Train under ``config`` (clean splits in, noise/sampling applied here) and evaluate on test."""
    seed = config.resolved_seed()
    tc: TrainConfig = replace(config.train, seed=seed)
    scenes = prepare_train_split(train_scenes, config, seed)
    res = train(scenes, tc, val_scenes, on_epoch=on_epoch)
    rep = evaluate_model(res.model, test_scenes, tc.coder, config.eval.score_threshold, config.eval.nms_iou)
    probe = replace(tc, box_loss="circum_iou")
    row = {
        "variant": name,
        "description": description,
        "steps": tc.steps,
        "n_train": len(scenes),
        "ap50": rep.ap50,
        "ap75": rep.ap75,
        "median_angle_err_deg": rep.median_angle_err_deg,
        "mean_angle_err_deg": rep.mean_angle_err_deg,
        "final_L_box": res.history[-1]["L_box"],
        "eval_L_box_circum": measure_box_loss(res.model, scenes, probe, "circum_iou", seed=seed),
        "unstable": res.unstable,
        "wall_time_s": res.wall_time,
    }
    logger.info("variant %s: %s", name, {k: row[k] for k in ("ap50", "median_angle_err_deg", "final_L_box")})
    return {"row": row, "result": res, "report": rep}


def run_variant(v: Variant, base: RunConfig, train_scenes, val_scenes, test_scenes) -> dict:
    return run_config(variant_config(base, v), train_scenes, val_scenes, test_scenes, v.name, v.description)


def write_report(rows: list, out_dir, plot: bool = True) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "sweep.csv", "json": out / "sweep.json"}
    with open(paths["csv"], "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in SWEEP_COLUMNS})
    paths["json"].write_text(json.dumps([{k: r[k] for k in SWEEP_COLUMNS} for r in rows], indent=2))
    if plot:
        from .plotting import plot_sweep

        paths["png"] = plot_sweep(rows, out / "sweep.png")
    return paths
