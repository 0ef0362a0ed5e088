"""Confusion matrices and one-vs-all classification metrics.

Empty denominators follow the 0/0 -> 0 convention for precision, recall
and F1; a class with no support and no predictions therefore scores F1 = 0
and still counts toward the macro average.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ZERO_DIVISION_NOTE = "Pr/Re/F1 with an empty denominator are reported as 0."


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows = truth, columns = prediction

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def normalized(self) -> np.ndarray:
        """Row-normalized view; rows of empty classes stay all-zero."""
        sums = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        return np.divide(self.counts, sums, out=np.zeros(self.counts.shape), where=sums > 0)


def confusion_matrix(truth, pred, n_classes: int) -> ConfusionMatrix:
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    if truth.shape != pred.shape:
        raise ValueError(f"truth and predictions differ in length: {truth.size} vs {pred.size}")
    for name, arr in (("truth", truth), ("prediction", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} label out of range [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (truth, pred), 1)
    return ConfusionMatrix(counts)


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den > 0)


@dataclass(frozen=True)
class MetricsReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_f1: float
    accuracy: float
    n: int
    positive_class: int | None = None
    names: tuple[str, ...] = field(default=())

    @property
    def macro_precision(self) -> float:
        return float(np.mean(self.precision)) if self.precision.size else 0.0

    @property
    def macro_recall(self) -> float:
        return float(np.mean(self.recall)) if self.recall.size else 0.0

    @property
    def headline_f1(self) -> float:
        """Macro F1, or the positive class's F1 for binary reports."""
        if self.positive_class is None:
            return self.macro_f1
        return float(self.f1[self.positive_class])

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "headline_f1": self.headline_f1,
            "positive_class": self.positive_class,
            "per_class": {
                (self.names[c] if c < len(self.names) else str(c)): {
                    "precision": float(self.precision[c]),
                    "recall": float(self.recall[c]),
                    "f1": float(self.f1[c]),
                }
                for c in range(self.f1.size)
            },
        }


def classification_metrics(cm: ConfusionMatrix, positive_class: int | None = None, names=()) -> MetricsReport:
    """Per-class one-vs-all precision/recall/F1, macro F1 and accuracy.

    ``positive_class`` marks a binary report (the bad-quality class, 0, in
    the 2-class style); the macro values are still filled in.
    """
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    pred_tot = c.sum(axis=0)
    true_tot = c.sum(axis=1)
    precision = _safe_div(tp, pred_tot)
    recall = _safe_div(tp, true_tot)
    f1 = _safe_div(2 * tp, pred_tot + true_tot)
    total = c.sum()
    return MetricsReport(
        precision=precision,
        recall=recall,
        f1=f1,
        macro_f1=float(f1.mean()) if f1.size else 0.0,
        accuracy=float(tp.sum() / total) if total > 0 else 0.0,
        n=int(total),
        positive_class=positive_class,
        names=tuple(names),
    )


@dataclass(frozen=True)
class BinaryMetrics:
    precision: float
    recall: float
    f1: float
    accuracy: float
    n: int

    def to_json(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1, "accuracy": self.accuracy, "n": self.n}


def binary_metrics(truth, pred) -> BinaryMetrics:
    truth = np.asarray(truth).astype(bool)
    pred = np.asarray(pred).astype(bool)
    tp = int(np.sum(truth & pred))
    fp = int(np.sum(~truth & pred))
    fn = int(np.sum(truth & ~pred))
    n = truth.size
    pr = tp / (tp + fp) if tp + fp else 0.0
    re = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0
    acc = float(np.sum(truth == pred) / n) if n else 0.0
    return BinaryMetrics(pr, re, f1, acc, n)


def detail_metrics(truth, probs, threshold: float = 0.5) -> list[BinaryMetrics]:
    """Per-detail binary metrics with GOOD (label 1) as the positive class.

    A probability ``>= threshold`` counts as a positive prediction.
    """
    truth = np.asarray(truth, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if truth.shape != probs.shape or truth.ndim != 2:
        raise ValueError(f"truth {truth.shape} and probs {probs.shape} must be matching (N, k) arrays")
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    pred = probs >= threshold
    return [binary_metrics(truth[:, j] == 1, pred[:, j]) for j in range(truth.shape[1])]
