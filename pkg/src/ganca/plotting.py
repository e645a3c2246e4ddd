"""Matplotlib figures for training curves, frame strips and comparison grids.

Everything renders off-screen (Agg) straight to files.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import over_white  # noqa: E402

plt.rcParams.update(
    {
        "font.size": 9,
        "axes.titlesize": 9,
        "axes.labelsize": 9,
        "legend.fontsize": 8,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "savefig.dpi": 150,
    }
)

COLUMN_TITLES = ("Edge", "GANCA", "NCA", "GT")


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def smooth(values, window: int = 25) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2 or window <= 1:
        return values
    window = min(window, len(values))
    kernel = np.ones(window) / window
    padded = np.concatenate([np.full(window - 1, values[0]), values])
    return np.convolve(padded, kernel, mode="valid")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_supervised_metrics(metrics_csv, out_path) -> Path:
    """Train loss (raw and smoothed) and validation loss on a log axis."""
    rows = _read_csv(metrics_csv)
    fig, ax = plt.subplots(figsize=(5, 3))
    for split, color in (("train", "C0"), ("val", "C1")):
        pts = [(int(r["step"]), float(r["loss"])) for r in rows if r["split"] == split]
        if not pts:
            continue
        steps, losses = map(np.asarray, zip(*pts))
        if split == "train":
            ax.plot(steps, losses, color=color, alpha=0.25, lw=0.6)
            ax.plot(steps, smooth(losses), color=color, lw=1.2, label="train")
        else:
            ax.plot(steps, losses, color=color, lw=1.2, marker=".", label="val")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("L2 loss")
    ax.legend(frameon=False)
    return _save(fig, out_path)


def plot_gan_metrics(metrics_csv, out_path) -> Path:
    rows = _read_csv(metrics_csv)
    steps = np.array([int(r["step"]) for r in rows])
    fig, ax = plt.subplots(figsize=(5, 3))
    for key, color in (("loss_g", "C2"), ("loss_d", "C3")):
        vals = np.array([float(r[key]) for r in rows])
        ax.plot(steps, vals, color=color, alpha=0.25, lw=0.6)
        ax.plot(steps, smooth(vals), color=color, lw=1.2, label=key.replace("_", " "))
    ax.axhspan(0, 1, color="0.9", zorder=0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    return _save(fig, out_path)


def plot_metrics(metrics_csv, out_path) -> Path:
    """Dispatch on the CSV header (supervised or adversarial metrics)."""
    with open(metrics_csv, newline="") as fh:
        header = next(csv.reader(fh))
    if "loss_g" in header:
        return plot_gan_metrics(metrics_csv, out_path)
    return plot_supervised_metrics(metrics_csv, out_path)


def _show(ax, img):
    ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
    ax.set_xticks([])
    ax.set_yticks([])
    for s in ax.spines.values():
        s.set_visible(False)


def plot_frames(frames, out_path, cols: int = 12) -> Path:
    """Grid of RGBA frames composited over white, numbered from 0."""
    n = len(frames)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(cols * 0.8, rows * 0.9), squeeze=False)
    for i, ax in enumerate(axes.flat):
        if i < n:
            _show(ax, over_white(frames[i])[..., :3])
            ax.set_title(str(i), fontsize=6, pad=1)
        else:
            ax.axis("off")
    return _save(fig, out_path)


def plot_comparison(rows: list[tuple[str, list[np.ndarray]]], out_path, titles=COLUMN_TITLES) -> Path:
    """One labelled row per entry; each row holds already-composited RGB(A) tiles."""
    ncols = max(len(tiles) for _, tiles in rows)
    fig, axes = plt.subplots(len(rows), ncols, figsize=(ncols * 1.1, len(rows) * 1.15), squeeze=False)
    for r, (label, tiles) in enumerate(rows):
        for c in range(ncols):
            ax = axes[r, c]
            if c < len(tiles):
                _show(ax, tiles[c][..., :3])
            else:
                ax.axis("off")
            if r == 0 and c < len(titles):
                ax.set_title(titles[c])
        axes[r, 0].set_ylabel(label, rotation=0, ha="right", va="center", fontsize=7)
    return _save(fig, out_path)
