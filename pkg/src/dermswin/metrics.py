"""Confusion-matrix metrics, ROC/PR areas, and the sensitivity interval.

Multiclass metrics reduce one-vs-rest: each class is scored as the positive
against everything else, then macro aggregation takes the unweighted mean.
Zero-denominator precision/sensitivity/F1 come back as 0.0 with an
``undefined`` flag instead of NaN. ROC-AUC integrates the tie-grouped curve
with trapezoids, which is exactly the Mann-Whitney half-credit-for-ties
statistic; PR-AUC is the average-precision step sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import UndefinedMetricError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C), rows = true class, cols = predicted
    class_names: list[str]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        c = len(self.class_names)
        if self.counts.shape != (c, c):
            raise ValueError(f"counts must be ({c},{c}) for {c} classes, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion matrix entries must be non-negative")

    @classmethod
    def from_predictions(cls, true_labels, predicted, class_names: Sequence[str]) -> "ConfusionMatrix":
        true_labels = np.asarray(true_labels, dtype=np.int64)
        predicted = np.asarray(predicted, dtype=np.int64)
        c = len(class_names)
        if true_labels.shape != predicted.shape:
            raise ValueError("label arrays must have equal length")
        if true_labels.size and (true_labels.min() < 0 or true_labels.max() >= c
                                 or predicted.min() < 0 or predicted.max() >= c):
            raise ValueError(f"labels must lie in [0, {c})")
        counts = np.zeros((c, c), dtype=np.int64)
        np.add.at(counts, (true_labels, predicted), 1)
        return cls(counts, list(class_names))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def support(self, class_id: int) -> int:
        return int(self.counts[class_id].sum())


@dataclass
class ScoredPredictions:
    probabilities: np.ndarray  # (N, C)
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n, c = self.probabilities.shape
        if self.labels.shape != (n,):
            raise ValueError("labels must align with probability rows")
        if (self.probabilities < 0).any() or (self.probabilities > 1).any():
            raise ValueError("probabilities must lie in [0, 1]")
        if n and np.abs(self.probabilities.sum(axis=1) - 1.0).max() > 1e-6:
            raise ValueError("probability rows must sum to 1 within 1e-6")
        if n and (self.labels.min() < 0 or self.labels.max() >= c):
            raise ValueError(f"labels must lie in [0, {c})")

    @property
    def num_classes(self) -> int:
        return self.probabilities.shape[1]


def accuracy(cm: ConfusionMatrix) -> float:
    """Percent of samples on the diagonal."""
    total = cm.total
    if total == 0:
        raise UndefinedMetricError("accuracy of an empty confusion matrix")
    return 100.0 * float(np.trace(cm.counts)) / total


def f1_score(precision: float, sensitivity: float) -> float:
    """Harmonic mean; 0 when both inputs are 0."""
    denom = precision + sensitivity
    if denom == 0.0:
        return 0.0
    return 2.0 * precision * sensitivity / denom


@dataclass
class ClassMetrics:
    precision: float
    sensitivity: float
    f1: float
    undefined: bool
    support: int


def per_class_prf(cm: ConfusionMatrix, class_id: int) -> ClassMetrics:
    """One-vs-rest precision/sensitivity/F1 for a class."""
    tp = float(cm.counts[class_id, class_id])
    fp = float(cm.counts[:, class_id].sum() - tp)
    fn = float(cm.counts[class_id].sum() - tp)
    undefined = False
    if tp + fp == 0.0:
        precision, undefined = 0.0, True
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0.0:
        sensitivity, undefined = 0.0, True
    else:
        sensitivity = tp / (tp + fn)
    return ClassMetrics(precision, sensitivity, f1_score(precision, sensitivity),
                        undefined, cm.support(class_id))


@dataclass
class MacroMetrics:
    precision: float
    sensitivity: float
    f1: float


def macro_metrics(cm: ConfusionMatrix, weighted: bool = False) -> MacroMetrics:
    """Mean of per-class values; F1 is the mean of per-class F1s, not the
    harmonic mean of the macro precision/sensitivity."""
    per = [per_class_prf(cm, i) for i in range(len(cm.class_names))]
    if weighted:
        w = np.array([p.support for p in per], dtype=np.float64)
        if w.sum() == 0:
            raise UndefinedMetricError("weighted macro over an empty matrix")
        w = w / w.sum()
    else:
        w = np.full(len(per), 1.0 / len(per))
    return MacroMetrics(
        float(sum(wi * p.precision for wi, p in zip(w, per))),
        float(sum(wi * p.sensitivity for wi, p in zip(w, per))),
        float(sum(wi * p.f1 for wi, p in zip(w, per))),
    )


# -- ranking metrics -----------------------------------------------------------


def _binary_targets(scored: ScoredPredictions, class_id: int) -> tuple[np.ndarray, np.ndarray]:
    scores = scored.probabilities[:, class_id]
    positive = scored.labels == class_id
    return scores, positive


def _grouped_counts(scores: np.ndarray, positive: np.ndarray):
    """Cumulative (tp, fp) after each distinct descending threshold."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    p = positive[order]
    # last index of each tie group
    boundary = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    tp = np.cumsum(p)[boundary].astype(np.float64)
    fp = np.cumsum(~p)[boundary].astype(np.float64)
    return s[boundary], tp, fp


def roc_curve_points(scored: ScoredPredictions, class_id: int):
    """(thresholds, fpr, tpr), starting at the all-negative point (0, 0)."""
    scores, positive = _binary_targets(scored, class_id)
    n_pos = int(positive.sum())
    n_neg = int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"ROC for class {class_id} needs both positives and negatives "
            f"(got {n_pos} / {n_neg})"
        )
    thr, tp, fp = _grouped_counts(scores, positive)
    thresholds = np.concatenate([[np.inf], thr])
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    return thresholds, fpr, tpr


def roc_auc(scored: ScoredPredictions, class_id: int) -> float:
    _, fpr, tpr = roc_curve_points(scored, class_id)
    trapezoid = getattr(np, "trapezoid", None) or np.trapz
    return float(trapezoid(tpr, fpr))


def pr_curve_points(scored: ScoredPredictions, class_id: int):
    """(thresholds, recall, precision) at each distinct threshold."""
    scores, positive = _binary_targets(scored, class_id)
    n_pos = int(positive.sum())
    if n_pos == 0:
        raise UndefinedMetricError(f"PR for class {class_id} needs at least one positive")
    thr, tp, fp = _grouped_counts(scores, positive)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return thr, recall, precision


def pr_auc(scored: ScoredPredictions, class_id: int) -> float:
    """Average precision: sum of precision at each new recall step."""
    _, recall, precision = pr_curve_points(scored, class_id)
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def per_class_auc(scored: ScoredPredictions, kind: str = "roc") -> list[Optional[float]]:
    """One AUC per class; None where the metric is undefined for the data."""
    fn = roc_auc if kind == "roc" else pr_auc
    out: list[Optional[float]] = []
    for c in range(scored.num_classes):
        try:
            out.append(fn(scored, c))
        except UndefinedMetricError:
            out.append(None)
    return out


def macro_auc(scored: ScoredPredictions, kind: str = "roc") -> float:
    """Mean AUC over the classes where it is defined."""
    values = [v for v in per_class_auc(scored, kind) if v is not None]
    if not values:
        raise UndefinedMetricError(f"macro {kind}-AUC undefined for every class")
    return float(np.mean(values))


def sensitivity_ci(sen: float, n_pos: int, z: float = 1.96) -> tuple[float, float]:
    """Normal-approximation 95% interval for a sensitivity estimate."""
    if n_pos <= 0:
        raise UndefinedMetricError("confidence interval needs at least one positive")
    if not 0.0 <= sen <= 1.0:
        raise ValueError(f"sensitivity must lie in [0, 1], got {sen}")
    half = z * math.sqrt(sen * (1.0 - sen) / n_pos)
    return max(0.0, sen - half), min(1.0, sen + half)


# -- report assembly -----------------------------------------------------------


@dataclass
class ClassReport:
    name: str
    metrics: ClassMetrics
    roc_auc: Optional[float]
    pr_auc: Optional[float]
    sensitivity_ci: Optional[tuple[float, float]]


@dataclass
class Report:
    accuracy: float
    per_class: list[ClassReport]
    macro: MacroMetrics
    macro_roc_auc: Optional[float]
    macro_pr_auc: Optional[float]


def compile_report(cm: ConfusionMatrix, scored: Optional[ScoredPredictions] = None) -> Report:
    rocs = per_class_auc(scored, "roc") if scored is not None else [None] * len(cm.class_names)
    prs = per_class_auc(scored, "pr") if scored is not None else [None] * len(cm.class_names)
    per = []
    for i, name in enumerate(cm.class_names):
        m = per_class_prf(cm, i)
        ci = sensitivity_ci(m.sensitivity, m.support) if m.support > 0 else None
        per.append(ClassReport(name, m, rocs[i], prs[i], ci))

    def _macro(values):
        defined = [v for v in values if v is not None]
        return float(np.mean(defined)) if defined else None

    return Report(accuracy(cm), per, macro_metrics(cm), _macro(rocs), _macro(prs))


def _fmt(v, width=9) -> str:
    if v is None:
        return "-".rjust(width)
    return f"{v:.4f}".rjust(width)


def render_report_text(report: Report) -> str:
    name_w = max([len(c.name) for c in report.per_class] + [len("macro")])
    lines = [f"accuracy: {report.accuracy:.2f}%"]
    header = (f"{'class'.ljust(name_w)} {'precision'.rjust(9)} {'recall'.rjust(9)} "
              f"{'f1'.rjust(9)} {'roc_auc'.rjust(9)} {'pr_auc'.rjust(9)} "
              f"{'ci95_lo'.rjust(9)} {'ci95_hi'.rjust(9)} support")
    lines.append(header)
    for c in report.per_class:
        ci_lo, ci_hi = c.sensitivity_ci if c.sensitivity_ci else (None, None)
        flag = " *" if c.metrics.undefined else ""
        lines.append(
            f"{c.name.ljust(name_w)} {_fmt(c.metrics.precision)} {_fmt(c.metrics.sensitivity)} "
            f"{_fmt(c.metrics.f1)} {_fmt(c.roc_auc)} {_fmt(c.pr_auc)} "
            f"{_fmt(ci_lo)} {_fmt(ci_hi)} {c.metrics.support}{flag}"
        )
    lines.append(
        f"{'macro'.ljust(name_w)} {_fmt(report.macro.precision)} {_fmt(report.macro.sensitivity)} "
        f"{_fmt(report.macro.f1)} {_fmt(report.macro_roc_auc)} {_fmt(report.macro_pr_auc)} "
        f"{_fmt(None)} {_fmt(None)} {sum(c.metrics.support for c in report.per_class)}"
    )
    if any(c.metrics.undefined for c in report.per_class):
        lines.append("* zero-denominator metrics reported as 0")
    return "\n".join(lines) + "\n"


def write_report_csv(report: Report, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "precision", "recall", "f1", "roc_auc", "pr_auc",
                    "ci95_lo", "ci95_hi", "support", "undefined"])
        for c in report.per_class:
            ci = c.sensitivity_ci or (None, None)
            w.writerow([c.name, c.metrics.precision, c.metrics.sensitivity, c.metrics.f1,
                        c.roc_auc, c.pr_auc, ci[0], ci[1], c.metrics.support,
                        int(c.metrics.undefined)])
        w.writerow(["macro", report.macro.precision, report.macro.sensitivity, report.macro.f1,
                    report.macro_roc_auc, report.macro_pr_auc, None, None,
                    sum(c.metrics.support for c in report.per_class), ""])
        w.writerow(["accuracy_percent", report.accuracy, None, None, None, None, None, None,
                    None, ""])


def write_curve_csv(path, thresholds, xs, ys, x_name: str, y_name: str) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", x_name, y_name])
        for t, x, y in zip(thresholds, xs, ys):
            w.writerow([t, x, y])
