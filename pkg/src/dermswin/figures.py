"""Rendering of evaluation artifacts to image files.

All plots go straight to disk through the Agg backend, so rendering works
in headless runs. Each function writes one file and returns its path.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)
import numpy as np  # noqa: E402

from .analysis import PCAResult  # noqa: E402
from .metrics import (  # noqa: E402
    ConfusionMatrix,
    ScoredPredictions,
    pr_auc,
    pr_curve_points,
    roc_auc,
    roc_curve_points,
)

__all__ = [
    "save_training_curves",
    "save_confusion_matrix",
    "save_roc_curves",
    "save_pr_curves",
    "save_pca_scatter",
]


def save_training_curves(history: Sequence[dict], path) -> Path:
    """Loss on the left panel, validation accuracy and F1 on the right."""
    path = Path(path)
    epochs = [r["epoch"] for r in history]
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(epochs, [r["train_loss"] for r in history], color="tab:blue")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    ax_loss.grid(alpha=0.3)
    ax_val.plot(epochs, [r["val_acc"] for r in history], color="tab:green", label="val accuracy (%)")
    ax_val.plot(epochs, [100.0 * r["val_f1"] for r in history], color="tab:orange", label="val macro F1 (x100)")
    ax_val.set_xlabel("epoch")
    ax_val.grid(alpha=0.3)
    ax_val.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_confusion_matrix(cm: ConfusionMatrix, path) -> Path:
    path = Path(path)
    counts = cm.counts
    n = counts.shape[0]
    fig, ax = plt.subplots(figsize=(1.2 * n + 2, 1.2 * n + 1.5))
    image = ax.imshow(counts, cmap="Blues")
    fig.colorbar(image, ax=ax, fraction=0.046)
    ax.set_xticks(range(n), cm.class_names, rotation=45, ha="right")
    ax.set_yticks(range(n), cm.class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("actual")
    threshold = counts.max() / 2 if counts.max() else 0.5
    for i in range(n):
        for j in range(n):
            color = "white" if counts[i, j] > threshold else "black"
            ax.text(j, i, str(counts[i, j]), ha="center", va="center", color=color)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _curve_figure(scored: ScoredPredictions, class_names: Sequence[str], kind: str):
    fig, ax = plt.subplots(figsize=(6, 5))
    for class_id, name in enumerate(class_names):
        positives = int((scored.labels == class_id).sum())
        if positives == 0 or (kind == "roc" and positives == scored.labels.shape[0]):
            continue
        if kind == "roc":
            _, xs, ys = roc_curve_points(scored, class_id)
            label = f"{name} (AUC={roc_auc(scored, class_id):.3f})"
        else:
            _, xs, ys = pr_curve_points(scored, class_id)
            label = f"{name} (AP={pr_auc(scored, class_id):.3f})"
        ax.plot(xs, ys, label=label)
    if kind == "roc":
        ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=1)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
    else:
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right" if kind == "roc" else "lower left", fontsize=8)
    return fig


def save_roc_curves(scored: ScoredPredictions, class_names: Sequence[str], path) -> Path:
    path = Path(path)
    fig = _curve_figure(scored, class_names, "roc")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_pr_curves(scored: ScoredPredictions, class_names: Sequence[str], path) -> Path:
    path = Path(path)
    fig = _curve_figure(scored, class_names, "pr")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_pca_scatter(result: PCAResult, path, class_names: Optional[Sequence[str]] = None) -> Path:
    path = Path(path)
    points = result.projected
    fig, ax = plt.subplots(figsize=(6, 5))
    if result.labels is None:
        ax.scatter(points[:, 0], points[:, 1], s=14, alpha=0.7)
    else:
        for class_id in np.unique(result.labels):
            member = points[result.labels == class_id]
            name = class_names[int(class_id)] if class_names else str(int(class_id))
            ax.scatter(member[:, 0], member[:, 1], s=14, alpha=0.7, label=name)
        ax.legend(fontsize=8)
    variance = result.explained_variance
    total = variance.sum()
    share = variance / total if total > 0 else variance
    ax.set_xlabel(f"component 1 ({100 * share[0]:.1f}% of projected variance)")
    ax.set_ylabel(f"component 2 ({100 * share[1]:.1f}% of projected variance)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
