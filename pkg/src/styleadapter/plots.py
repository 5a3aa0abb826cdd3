"""Report figures written next to the CSV/JSON outputs."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .utils import to_uint8  # noqa: E402


def _moving_average(values: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(values) < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def plot_loss_curves(curves: Mapping[str, Sequence[tuple[int, float]]], path: str | Path,
                     window: int = 25) -> Path:
    fig, axes = plt.subplots(1, len(curves), figsize=(5 * len(curves), 3.5), squeeze=False)
    for ax, (name, curve) in zip(axes[0], curves.items()):
        if not curve:
            ax.set_visible(False)
            continue
        steps = np.array([s for s, _ in curve])
        losses = np.array([l for _, l in curve])
        ax.plot(steps, losses, color="0.75", lw=0.6, label="per step")
        smooth = _moving_average(losses, window)
        ax.plot(steps[len(steps) - len(smooth):], smooth, color="C0", lw=1.5, label=f"mean of {window}")
        ax.set_xlabel("step")
        ax.set_ylabel("noise MSE")
        ax.set_title(name)
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_eval_report(report, path: str | Path) -> Path:
    """Mean style score per reference, with the per-prompt scores overlaid."""
    by_style: dict[str, list[float]] = defaultdict(list)
    for row in report.rows:
        by_style[Path(row.style_ref).name].append(row.style_score)
    names = list(by_style)
    fig, ax = plt.subplots(figsize=(max(4, 1.1 * len(names) + 2), 3.5))
    means = [np.mean(by_style[n]) for n in names]
    ax.bar(range(len(names)), means, color="C0", alpha=0.6)
    for i, n in enumerate(names):
        ax.scatter([i] * len(by_style[n]), by_style[n], color="k", s=10, zorder=3)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("style score")
    agg = report.aggregates
    title = f"n={agg['count']}  mean style={agg['mean_style']:.4f}"
    if agg["mean_text"] is not None:
        title += f"  mean text={agg['mean_text']:.4f}"
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_image_grid(images: Sequence[torch.Tensor], path: str | Path, titles: Sequence[str] = (),
                    ncols: int = 4) -> Path:
    n = len(images)
    nrows = max(1, -(-n // ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(2 * ncols, 2.2 * nrows), squeeze=False)
    for k, ax in enumerate(axes.flat):
        ax.axis("off")
        if k < n:
            ax.imshow(to_uint8(images[k]))
            if k < len(titles):
                ax.set_title(titles[k], fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
