"""Figure rendering for the report path.

Every report-producing CLI command renders PNG figures next to its delimited
output: training curves, score bars with std whiskers, and prediction panels
(image / truth / prediction rasters). The Agg backend keeps rendering
headless and byte-deterministic for a fixed matplotlib version.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .harness import ScoreTable
from .trainer import TrainReport


def save_training_curves(reports: list[TrainReport], path: str | Path, labels: list[str] | None = None) -> Path:
    """Loss and validation-DSC trajectories, one line per report."""
    path = Path(path)
    labels = labels or [f"run {i}" for i in range(len(reports))]
    fig, (ax_loss, ax_dsc) = plt.subplots(1, 2, figsize=(9, 3.2))
    for report, label in zip(reports, labels):
        epochs = [r.epoch for r in report.records]
        ax_loss.plot(epochs, [r.total for r in report.records], label=label, linewidth=1.2)
        ax_dsc.plot(epochs, [r.val_dsc for r in report.records], label=label, linewidth=1.2)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    ax_dsc.set_xlabel("epoch")
    ax_dsc.set_ylabel("validation DSC")
    ax_dsc.set_ylim(0.0, 1.0)
    if len(reports) > 1:
        ax_dsc.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_score_bars(table: ScoreTable, path: str | Path, title: str = "DSC by dataset") -> Path:
    """Grouped mean-DSC bars per dataset with std whiskers."""
    path = Path(path)
    kinds = table.kinds()
    datasets = table.datasets()
    if "Average" in datasets:
        datasets = [d for d in datasets if d != "Average"] + ["Average"]
    cells = {(r.model_kind, r.dataset_name): r for r in table.rows}
    x = np.arange(len(datasets))
    width = 0.8 / max(len(kinds), 1)
    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(datasets), 3.2))
    for j, kind in enumerate(kinds):
        means = [cells[(kind, d)].mean_dsc if (kind, d) in cells else np.nan for d in datasets]
        stds = [cells[(kind, d)].std_dsc if (kind, d) in cells else 0.0 for d in datasets]
        ax.bar(x + (j - (len(kinds) - 1) / 2) * width, means, width, yerr=stds, capsize=2, label=kind)
    ax.set_xticks(x)
    ax.set_xticklabels(datasets, fontsize=8)
    ax.set_ylabel("DSC")
    ax.set_ylim(0.0, 1.0)
    ax.set_title(title, fontsize=9)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def save_prediction_panel(
    images: np.ndarray,
    truths: np.ndarray,
    preds: np.ndarray,
    path: str | Path,
    max_rows: int = 4,
) -> Path:
    """Raster grid: one row per slice, columns image / ground truth / prediction."""
    path = Path(path)
    n = min(images.shape[0], max_rows)
    fig, axes = plt.subplots(n, 3, figsize=(6.0, 2.0 * n), squeeze=False)
    for i in range(n):
        for ax, (data, label, kw) in zip(
            axes[i],
            (
                (images[i], "image", dict(cmap="gray")),
                (truths[i], "truth", dict(cmap="gray", vmin=0, vmax=1)),
                (preds[i], "prediction", dict(cmap="gray", vmin=0, vmax=1)),
            ),
        ):
            ax.imshow(data, **kw)
            ax.set_axis_off()
            if i == 0:
                ax.set_title(label, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


__all__ = ["save_training_curves", "save_score_bars", "save_prediction_panel"]
