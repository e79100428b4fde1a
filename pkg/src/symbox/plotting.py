"""Figures and image renders for run reports.

Everything is drawn with the Agg backend, so no display is needed. Detection
renders can also be written as binary PPM with a tiny line rasteriser, which
works without matplotlib.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .geometry import OrientedBox, vertices

GT_COLOR = (0, 200, 0)
PRED_COLOR = (230, 0, 0)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def have_matplotlib() -> bool:
    try:
        _pyplot()
    except ImportError:
        return False
    return True


def plot_history(history: list, path) -> Path:
    """Loss terms per epoch on a log axis, with the validation metrics alongside."""
    plt = _pyplot()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    epochs = [r["epoch"] for r in history]
    for col in ("L_flp", "L_rot", "L_cls", "L_cn", "L_box", "L_total"):
        vals = [max(r[col], 1e-6) for r in history]
        ax1.plot(epochs, vals, marker="o", ms=3, label=col)
    ax1.set_yscale("log")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax2.plot(epochs, [r["val_median_angle_err_deg"] for r in history], "C0-o", ms=3)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("val median angle error (deg)", color="C0")
    twin = ax2.twinx()
    twin.plot(epochs, [r["val_ap50"] for r in history], "C1-s", ms=3)
    twin.set_ylabel("val AP50", color="C1")
    twin.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_angle_errors(errors, path, title: str = "angle error mod 90 deg") -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(np.asarray(errors, dtype=float), bins=np.linspace(0, 45, 46), color="C0")
    ax.set_xlabel("error (deg)")
    ax.set_ylabel("objects")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_sweep(rows: list, path) -> Path:
    """Bar chart of AP50 and median angle error per sweep variant."""
    plt = _pyplot()
    names = [r["variant"] for r in rows]
    x = np.arange(len(names))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(max(8, 1.2 * len(names) + 4), 4))
    ax1.bar(x, [r["ap50"] for r in rows], color="C1")
    ax1.set_ylabel("test AP50")
    ax1.set_ylim(0, 1)
    ax2.bar(x, [r["median_angle_err_deg"] for r in rows], color="C0")
    ax2.set_ylabel("median angle error (deg)")
    for ax in (ax1, ax2):
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=35, ha="right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def render_png(image: np.ndarray, gt_boxes: list, det_boxes: list, path) -> Path:
    plt = _pyplot()
    h, w = image.shape
    fig = plt.figure(figsize=(w / 50, h / 50), dpi=100)
    ax = fig.add_axes([0, 0, 1, 1])
    ax.imshow(image, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
    for boxes, color in ((gt_boxes, GT_COLOR), (det_boxes, PRED_COLOR)):
        for b in boxes:
            v = vertices(b).vertices
            v = np.vstack([v, v[:1]])
            ax.plot(v[:, 0], v[:, 1], color=np.array(color) / 255.0, lw=1.2)
    ax.set_xlim(-0.5, w - 0.5)
    ax.set_ylim(h - 0.5, -0.5)
    ax.axis("off")
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def draw_box(rgb: np.ndarray, box: OrientedBox, color) -> None:
    """Draw the outline of ``box`` into an (H, W, 3) uint8 array in place."""
    v = vertices(box).vertices
    h, w = rgb.shape[:2]
    for i in range(4):
        (x0, y0), (x1, y1) = v[i], v[(i + 1) % 4]
        n = int(math.ceil(max(abs(x1 - x0), abs(y1 - y0)) * 2)) + 1
        xs = np.rint(np.linspace(x0, x1, n)).astype(int)
        ys = np.rint(np.linspace(y0, y1, n)).astype(int)
        ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        rgb[ys[ok], xs[ok]] = color


def write_ppm(path, rgb: np.ndarray) -> Path:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(rgb.tobytes())
    return Path(path)


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)


def render_ppm(image: np.ndarray, gt_boxes: list, det_boxes: list, path) -> Path:
    gray = np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    for b in gt_boxes:
        draw_box(rgb, b, GT_COLOR)
    for b in det_boxes:
        draw_box(rgb, b, PRED_COLOR)
    return write_ppm(path, rgb)


def render_detections(image, gt_boxes, det_boxes, stem, fmt: str = "auto") -> Path:
    """Write ``stem.png`` (matplotlib) or ``stem.ppm``; ``auto`` prefers PNG."""
    if fmt == "auto":
        fmt = "png" if have_matplotlib() else "ppm"
    stem = Path(stem)
    if fmt == "png":
        return render_png(image, gt_boxes, det_boxes, stem.with_suffix(".png"))
    return render_ppm(image, gt_boxes, det_boxes, stem.with_suffix(".ppm"))
