"""Principal-component projection of feature vectors and a class-separability score.

Features (typically the pooled representation before the classification
head) are mean-centered and projected onto the top eigenvectors of their
covariance.  The 2-D projection is what the plotting and CSV export
consume; the separability score summarizes how far apart the class
clusters sit relative to their spread.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import UndefinedMetricError

log = logging.getLogger(__name__)

__all__ = [
    "PCAResult",
    "pca_fit_project",
    "separability_score",
    "write_projection_csv",
]


@dataclass(frozen=True)
class PCAResult:
    """Fitted projection: orthonormal component rows and projected points."""

    components: np.ndarray  # (k, d), rows orthonormal
    explained_variance: np.ndarray  # (k,), descending
    mean: np.ndarray  # (d,)
    projected: np.ndarray  # (N, k)
    labels: Optional[np.ndarray]  # (N,) int, or None

    @property
    def num_components(self) -> int:
        return self.components.shape[0]


def pca_fit_project(features, labels=None, k: int = 2) -> PCAResult:
    """Fit PCA on ``features`` (N, d) and project onto the top ``k`` components.

    Covariance uses the N-1 denominator.  Components are eigenvectors of
    the covariance sorted by descending eigenvalue, each flipped so its
    largest-magnitude entry is positive; that makes the output
    deterministic across eigensolver sign choices.

    When fewer than ``k`` directions can carry variance (N <= k), the
    result is truncated to N-1 components and a warning is logged.
    """
    x = np.asarray(getattr(features, "data", features), dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D (N, d), got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise ValueError(f"need at least 2 feature rows, got {n}")
    if not 1 <= k <= d:
        raise ValueError(f"k must be in [1, {d}], got {k}")
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise ValueError(f"labels shape {labels.shape} does not match {n} rows")

    rank_bound = min(n - 1, d)
    if rank_bound < k:
        log.warning("only %d informative components for %d points, truncating from k=%d", rank_bound, n, k)
        k = rank_bound

    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1][:k]
    variance = np.maximum(eigenvalues[order], 0.0)
    components = eigenvectors[:, order].T

    # Fix each row's sign: largest-magnitude entry positive.
    flip = np.sign(components[np.arange(k), np.abs(components).argmax(axis=1)])
    flip[flip == 0] = 1.0
    components = components * flip[:, None]

    projected = centered @ components.T
    return PCAResult(components, variance, mean, projected, labels)


def separability_score(result: PCAResult) -> float:
    """Ratio of between-class to within-class scatter in the projection.

    Higher means the class clusters are further apart relative to their
    spread.  Requires at least two classes among the labels.
    """
    if result.labels is None:
        raise UndefinedMetricError("separability needs per-point class labels")
    points = result.projected
    labels = result.labels
    classes = np.unique(labels)
    if classes.size < 2:
        raise UndefinedMetricError("separability needs at least two classes")

    overall_mean = points.mean(axis=0)
    between = 0.0
    within = 0.0
    for c in classes:
        members = points[labels == c]
        class_mean = members.mean(axis=0)
        between += members.shape[0] * float(((class_mean - overall_mean) ** 2).sum())
        within += float(((members - class_mean) ** 2).sum())
    if within == 0.0:
        if between == 0.0:
            raise UndefinedMetricError("all projected points coincide")
        return float("inf")
    return between / within


def write_projection_csv(result: PCAResult, path, class_names: Optional[Sequence[str]] = None) -> None:
    """Write projected coordinates as ``x,y,class`` rows for plotting."""
    if result.num_components < 2:
        raise ValueError("projection export needs at least 2 components")
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["x", "y", "class"])
        for i, point in enumerate(result.projected):
            if result.labels is None:
                name = ""
            elif class_names is not None:
                name = class_names[int(result.labels[i])]
            else:
                name = str(int(result.labels[i]))
            writer.writerow([f"{point[0]:.8g}", f"{point[1]:.8g}", name])
