"""Matplotlib figures rendered next to the delimited outputs: loss curves for
training runs, prediction/error panels for evaluation, and a quick dataset
preview for generation."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .datagen import Sample
from .events import voxelize


def save_loss_curves(history, path) -> None:
    """Loss components and learning rate against the training step."""
    steps = [step for step, _, _ in history]
    lrs = [lr for _, lr, _ in history]
    series = {
        "reconstruction": [rep.reconstruction for _, _, rep in history],
        "structure": [rep.structure for _, _, rep in history],
        "motion": [rep.motion for _, _, rep in history],
        "total": [rep.total for _, _, rep in history],
    }
    fig, (ax_loss, ax_lr) = plt.subplots(
        2, 1, figsize=(7, 6), sharex=True, height_ratios=[3, 1])
    for label, values in series.items():
        if any(v != 0.0 for v in values) or label == "total":
            ax_loss.plot(steps, values, label=label, linewidth=1.2)
    ax_loss.set_yscale("log")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(loc="upper right", fontsize=8)
    ax_loss.grid(alpha=0.3)
    ax_lr.plot(steps, lrs, color="tab:gray", linewidth=1.2)
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("step")
    ax_lr.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=130)
    plt.close(fig)


def _event_frame(sample: Sample) -> np.ndarray:
    grid = voxelize(sample.events, 1)[0]
    limit = max(1.0, float(np.abs(grid).max()))
    return grid / limit


def save_eval_panels(samples: list[Sample], predictions: list[np.ndarray],
                     path, max_samples: int = 4) -> None:
    """Rows of (image, events, sparse, prediction, ground truth, |error|)."""
    n = min(len(samples), max_samples)
    cols = ("image", "events", "sparse input", "prediction", "ground truth", "abs error")
    fig, axes = plt.subplots(n, len(cols), figsize=(2.2 * len(cols), 2.3 * n),
                             squeeze=False)
    for r in range(n):
        s, d = samples[r], predictions[r]
        depth_lim = (0.0, float(s.gt.max()) * 1.05)
        panels = (
            (np.transpose(s.image, (1, 2, 0)), None, None),
            (_event_frame(s), "coolwarm", (-1, 1)),
            (np.where(s.sparse[0] > 0, s.sparse[0], np.nan), "viridis", depth_lim),
            (d[0], "viridis", depth_lim),
            (s.gt[0], "viridis", depth_lim),
            (np.abs(d[0] - s.gt[0]), "magma", None),
        )
        for c, (img, cmap, lim) in enumerate(panels):
            ax = axes[r][c]
            kwargs = {} if lim is None else {"vmin": lim[0], "vmax": lim[1]}
            ax.imshow(img, cmap=cmap, **kwargs)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(cols[c], fontsize=9)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=130)
    plt.close(fig)


def save_dataset_preview(samples: list[Sample], path, max_samples: int = 4) -> None:
    """Rows of (image, events, sparse, ground truth) for generated samples."""
    n = min(len(samples), max_samples)
    cols = ("image", "events", "sparse input", "ground truth")
    fig, axes = plt.subplots(n, len(cols), figsize=(2.2 * len(cols), 2.3 * n),
                             squeeze=False)
    for r in range(n):
        s = samples[r]
        depth_lim = (0.0, float(s.gt.max()) * 1.05)
        panels = (
            (np.transpose(s.image, (1, 2, 0)), None, None),
            (_event_frame(s), "coolwarm", (-1, 1)),
            (np.where(s.sparse[0] > 0, s.sparse[0], np.nan), "viridis", depth_lim),
            (s.gt[0], "viridis", depth_lim),
        )
        for c, (img, cmap, lim) in enumerate(panels):
            ax = axes[r][c]
            kwargs = {} if lim is None else {"vmin": lim[0], "vmax": lim[1]}
            ax.imshow(img, cmap=cmap, **kwargs)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(cols[c], fontsize=9)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=130)
    plt.close(fig)
