"""Figures written next to the JSON reports. Uses the non-interactive Agg backend."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (4.5, 3.2),
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "axes.grid": True,
    "grid.linestyle": "--",
    "grid.alpha": 0.6,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "lines.linewidth": 1.2,
}

# fixed metadata keeps PNG bytes stable across runs
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def plot_loss_curve(records, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = [r["epoch"] + 1 for r in records]
        ax.plot(epochs, [r["mean_loss"] for r in records], marker="o", markersize=2)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean episode loss")
        ax.set_yscale("log")
        return _save(fig, path)


def plot_task_accuracies(report, path, baseline=None) -> Path:
    """Per-task accuracy histograms, one panel per evaluated split.

    Seen splits usually hold far more tasks than unseen ones, so each panel
    gets its own count axis.
    """
    models = [(name, rep) for name, rep in (("T2M-HN", report), ("baseline", baseline)) if rep is not None]
    splits = [s for s in ("seen", "unseen") if getattr(report, s) is not None]
    metric = getattr(report, splits[0]).metric
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(splits), figsize=(4.2 * len(splits), 3.2), squeeze=False)
        bins = np.linspace(0.0, 1.0, 21)
        for ax, split in zip(axes[0], splits):
            data = [[t.accuracy for t in getattr(rep, split).tasks] for _, rep in models]
            labels = [f"{name} (mean {getattr(rep, split).mean:.3f})" for name, rep in models]
            ax.hist(data, bins=bins, label=labels)
            n = len(data[0])
            ax.set_title(f"{split}: {n} task{'s' if n != 1 else ''}")
            ax.set_xlabel(f"task {metric}")
            ax.legend(loc="upper left")
        axes[0][0].set_ylabel("tasks")
        return _save(fig, path)


def plot_ablation(rows, path) -> Path:
    """Grouped bars of seen/unseen/harmonic per variant with seed std as error bars."""
    metrics = ("seen", "unseen", "harmonic")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        x = np.arange(len(rows))
        width = 0.25
        for j, m in enumerate(metrics):
            ax.bar(x + (j - 1) * width, [r[m]["mean"] for r in rows], width,
                   yerr=[r[m]["std"] for r in rows], label=m, capsize=2)
        ax.set_xticks(x, [r["variant"] for r in rows], rotation=15)
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel("accuracy")
        ax.legend(loc="lower right")
        return _save(fig, path)
