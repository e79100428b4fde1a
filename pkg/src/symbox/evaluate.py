"""Detection and orientation metrics.

AP uses greedy one-to-one matching by rotated IoU in descending score order and
the VOC-2010 all-point interpolated area under the precision/recall curve.
Angle errors are measured modulo pi/2, so predicting the perpendicular axis of a
symmetric object counts as correct.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .angle import angle_error_deg
from .geometry import rotated_iou

AP_VARIANT = "voc2010-all-point"


def angle_error(pred: float, gt_sym: float) -> float:
    """Degrees in [0, 45]: ``min_k |pred - gt_sym - k*pi/2|``."""
    return angle_error_deg(pred, gt_sym)


def match_detections(dets: list, gts: list, iou_thresh: float):
    """Greedy matching over all images.

    ``dets[i]`` is a list of ``(box, score)`` for image ``i``; ``gts[i]`` a list of boxes.
    Returns ``(scores, tp_flags, n_gt)`` ordered by descending score, ties broken by
    detection index (image order, then position within the image).
    """
    flat = [(score, img, j, box) for img, ds in enumerate(dets) for j, (box, score) in enumerate(ds)]
    order = sorted(range(len(flat)), key=lambda k: -flat[k][0])
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    scores, tp = [], []
    for k in order:
        score, img, _, box = flat[k]
        best, best_iou = -1, iou_thresh
        for gi, g in enumerate(gts[img]):
            if used[img][gi]:
                continue
            iou = rotated_iou(box, g)
            if iou >= best_iou:
                best, best_iou = gi, iou
        if best >= 0:
            used[img][best] = True
        scores.append(score)
        tp.append(best >= 0)
    return np.array(scores), np.array(tp, dtype=bool), sum(len(g) for g in gts)


def average_precision(dets: list, gts: list, iou_thresh: float = 0.5) -> float:
    _, tp, n_gt = match_detections(dets, gts, iou_thresh)
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


@dataclass
class EvalReport:
    ap50: float
    ap75: float
    median_angle_err_deg: float
    mean_angle_err_deg: float
    n_objects: int
    per_shape: dict = field(default_factory=dict)
    ap_variant: str = AP_VARIANT

    def to_json(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    def rows(self) -> list:
        rows = [{"group": "all", "count": self.n_objects, "ap50": self.ap50, "ap75": self.ap75,
                 "median_angle_err_deg": self.median_angle_err_deg,
                 "mean_angle_err_deg": self.mean_angle_err_deg}]
        for kind, st in sorted(self.per_shape.items()):
            rows.append({"group": kind, "count": st["count"], "ap50": "", "ap75": "",
                         "median_angle_err_deg": st["median_angle_err_deg"],
                         "mean_angle_err_deg": st["mean_angle_err_deg"]})
        return rows

    def to_csv(self, path):
        rows = self.rows()
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


def _stats(errs) -> tuple[float, float]:
    if len(errs) == 0:
        return float("nan"), float("nan")
    return float(np.median(errs)), float(np.mean(errs))


def collect_predictions(model, scenes: list, coder: str = "psc", score_threshold: float = 0.3,
                        nms_iou: float = 0.5, batch: int = 8):
    """Detections and per-object angle readouts, one forward pass per image."""
    from .train import detections_from_maps, readout_from_maps

    dets, readouts = [], []
    for start in range(0, len(scenes), batch):
        chunk = scenes[start:start + batch]
        images = np.stack([s.image for s in chunk])
        out = model.forward(images)
        size = images.shape[1:]
        for b, s in enumerate(chunk):
            dets.append(detections_from_maps(out, size, score_threshold, nms_iou, coder, batch_index=b))
            centers = [(o.rbox.cx, o.rbox.cy) for o in s.objects]
            readouts.append(readout_from_maps(out, size, centers, coder, batch_index=b))
    return dets, readouts


def evaluate_model(model, scenes: list, coder: str = "psc", score_threshold: float = 0.3,
                   nms_iou: float = 0.5) -> EvalReport:
    dets, readouts = collect_predictions(model, scenes, coder, score_threshold, nms_iou)
    return build_report(scenes, dets, readouts)


def build_report(scenes: list, dets: list, readouts: list) -> EvalReport:
    gts = [[o.rbox for o in s.objects] for s in scenes]
    errs, kinds = [], []
    for s, angles in zip(scenes, readouts):
        for o, a in zip(s.objects, angles):
            errs.append(angle_error(a, o.theta_sym))
            kinds.append(o.shape_kind)
    errs = np.array(errs)
    med, mean = _stats(errs)
    per_shape = {}
    for kind in sorted(set(kinds)):
        sel = errs[np.array([k == kind for k in kinds])]
        m, mu = _stats(sel)
        per_shape[kind] = {"count": int(len(sel)), "median_angle_err_deg": m, "mean_angle_err_deg": mu}
    return EvalReport(
        ap50=average_precision(dets, gts, 0.5),
        ap75=average_precision(dets, gts, 0.75),
        median_angle_err_deg=med,
        mean_angle_err_deg=mean,
        n_objects=int(len(errs)),
        per_shape=per_shape,
    )
