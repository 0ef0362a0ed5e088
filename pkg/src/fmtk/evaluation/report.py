"""Model evaluation, paired model comparison, and CSV exports.

Comparisons pair the two models on shared bootstrap replicates of one test
set: replicate ``r`` draws the same image indices for both models, so each
replicate yields a matched pair of scores. The Wilcoxon signed-rank test
runs over those pairs. When fewer than five replicates differ (a model
compared with itself, for instance) the p-value is reported as 1.0 and the
report says why.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fmtk.dataio import Dataset
from fmtk.errors import DataError
from fmtk.evaluation.metrics import (
    ZERO_DIVISION_NOTE,
    ConfusionMatrix,
    MetricsReport,
    classification_metrics,
    confusion_matrix,
    detail_metrics,
)
from fmtk.evaluation.stats import InsufficientPairs, bootstrap_indices, wilcoxon_signed_rank
from fmtk.model import DETAIL_NAMES, MultiTaskNet
from fmtk.phantom import CLASS_NAMES

PAIRING_NOTE = "Wilcoxon pairs are bootstrap replicates of the test set, shared by both models."
POSITIVE_CLASS = {"2class": 0, "3class": None}


@dataclass
class Evaluation:
    """Predictions and metrics of one model on one labeled split."""

    name: str
    style: str
    image_ids: tuple[str, ...]
    truth: np.ndarray | None = None  # overall labels
    probs_b: np.ndarray | None = None
    detail_truth: np.ndarray | None = None
    probs_a: np.ndarray | None = None
    threshold: float = 0.5
    report: MetricsReport | None = field(default=None, init=False)
    cm: ConfusionMatrix | None = field(default=None, init=False)

    def __post_init__(self):
        if self.truth is not None and self.probs_b is not None:
            self.cm = confusion_matrix(self.truth, self.pred_b, self.probs_b.shape[1])
            self.report = classification_metrics(self.cm, POSITIVE_CLASS[self.style], CLASS_NAMES[self.style])

    @property
    def n(self) -> int:
        return len(self.image_ids)

    @property
    def pred_b(self) -> np.ndarray:
        return np.argmax(self.probs_b, axis=1)

    @property
    def has_details(self) -> bool:
        return self.detail_truth is not None and self.probs_a is not None

    def detail_reports(self):
        return detail_metrics(self.detail_truth, self.probs_a, self.threshold) if self.has_details else []

    def to_json(self) -> dict:
        out = {"model": self.name, "style": self.style, "n": self.n, "note": ZERO_DIVISION_NOTE}
        if self.report is not None:
            out["overall"] = self.report.to_json()
            out["confusion"] = self.cm.counts.tolist()
            out["confusion_normalized"] = self.cm.normalized().tolist()
        if self.has_details:
            out["details"] = {
                name: m.to_json() for name, m in zip(DETAIL_NAMES, self.detail_reports())
            }
            out["details"]["threshold"] = self.threshold
        return out


def _labels_or_none(ds: Dataset, getter):
    try:
        return getter()
    except DataError:
        return None


def evaluate(net: MultiTaskNet, dataset: Dataset, name: str = "model", threshold: float = 0.5) -> Evaluation:
    """Run ``net`` over every row of ``dataset`` and score whatever labels exist."""
    from fmtk.pipeline import predict

    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty split")
    probs_b, probs_a = predict(net, dataset.images())
    truth = _labels_or_none(dataset, dataset.overall) if probs_b is not None else None
    details = _labels_or_none(dataset, dataset.details) if probs_a is not None else None
    return Evaluation(
        name=name,
        style=dataset.style,
        image_ids=tuple(r.image for r in dataset.rows),
        truth=truth,
        probs_b=probs_b if truth is not None else None,
        detail_truth=details,
        probs_a=probs_a if details is not None else None,
        threshold=threshold,
    )


# -- replicate statistics ---------------------------------------------------------


def _replicate_f1(truth, pred, n_classes, indices, positive_class=None) -> np.ndarray:
    """Headline F1 for every bootstrap replicate (rows of ``indices``)."""
    out = np.empty(len(indices))
    for r, idx in enumerate(indices):
        counts = np.bincount(truth[idx] * n_classes + pred[idx], minlength=n_classes * n_classes)
        rep = classification_metrics(ConfusionMatrix(counts.reshape(n_classes, n_classes)), positive_class)
        out[r] = rep.headline_f1
    return out


def _replicate_binary_f1(truth, pred, indices) -> np.ndarray:
    t, p = truth[indices], pred[indices]
    tp = np.sum(t & p, axis=1)
    denom = np.sum(t, axis=1) + np.sum(p, axis=1)
    return np.divide(2.0 * tp, denom, out=np.zeros(len(indices)), where=denom > 0)


def _paired_test(a_reps, b_reps, tail):
    try:
        res = wilcoxon_signed_rank(a_reps, b_reps, tail)
        return {"p_value": res.p_value, "statistic": res.statistic, "n": res.n, "method": res.method,
                "tail": res.tail}
    except InsufficientPairs as exc:
        return {"p_value": 1.0, "statistic": 0.0, "n": int(np.sum(a_reps != b_reps)), "method": "none",
                "tail": tail, "note": str(exc)}


def _ci(values, alpha):
    lo, hi = np.quantile(values, [alpha / 2, 1 - alpha / 2])
    return [float(lo), float(hi)]


def _score_block(point_a, point_b, reps_a, reps_b, tail, alpha):
    return {
        "a": float(point_a),
        "b": float(point_b),
        "delta": float(point_a - point_b),
        "ci_a": _ci(reps_a, alpha),
        "ci_b": _ci(reps_b, alpha),
        "ci_delta": _ci(reps_a - reps_b, alpha),
        "wilcoxon": _paired_test(reps_a, reps_b, tail),
    }


def compare_models(a: Evaluation, b: Evaluation, n_boot: int = 1000, seed: int = 0, tail: str = "two",
                   alpha: float = 0.05) -> dict:
    """Side-by-side comparison of two evaluations on the identical test set.

    Deltas are ``a - b``. ``tail="greater"`` tests whether ``a`` beats ``b``.
    Returns a JSON-serializable document; see :func:`format_comparison`.
    """
    if a.image_ids != b.image_ids:
        raise DataError("models were evaluated on different test sets")
    for name in ("truth", "detail_truth"):
        ta, tb = getattr(a, name), getattr(b, name)
        if ta is not None and tb is not None and not np.array_equal(ta, tb):
            raise DataError(f"test sets disagree on {name}")
    if n_boot < 100:
        raise ValueError("n_boot must be >= 100")
    indices = bootstrap_indices(a.n, n_boot, seed)
    doc = {
        "a": a.name,
        "b": b.name,
        "n": a.n,
        "n_boot": n_boot,
        "seed": seed,
        "alpha": alpha,
        "tail": tail,
        "notes": [ZERO_DIVISION_NOTE, PAIRING_NOTE, "Deltas are a - b."],
    }
    if a.report is not None and b.report is not None:
        n_classes = a.probs_b.shape[1]
        pos = POSITIVE_CLASS[a.style]
        reps_a = _replicate_f1(a.truth, a.pred_b, n_classes, indices, pos)
        reps_b = _replicate_f1(b.truth, b.pred_b, n_classes, indices, pos)
        names = CLASS_NAMES[a.style]
        doc["overall"] = {
            "metric": "macro_f1" if pos is None else f"f1[{names[pos]}]",
            **_score_block(a.report.headline_f1, b.report.headline_f1, reps_a, reps_b, tail, alpha),
            "accuracy": {"a": a.report.accuracy, "b": b.report.accuracy},
            "per_class_f1": {
                names[c]: {"a": float(a.report.f1[c]), "b": float(b.report.f1[c]),
                           "delta": float(a.report.f1[c] - b.report.f1[c])}
                for c in range(n_classes)
            },
            "confusion_normalized": {"a": a.cm.normalized().tolist(), "b": b.cm.normalized().tolist()},
        }
    if a.has_details and b.has_details:
        truth = a.detail_truth == 1
        da, db = a.detail_reports(), b.detail_reports()
        doc["details"] = {}
        for j, name in enumerate(DETAIL_NAMES):
            reps_a = _replicate_binary_f1(truth[:, j], a.probs_a[:, j] >= a.threshold, indices)
            reps_b = _replicate_binary_f1(truth[:, j], b.probs_a[:, j] >= b.threshold, indices)
            doc["details"][name] = _score_block(da[j].f1, db[j].f1, reps_a, reps_b, tail, alpha)
    if "overall" not in doc and "details" not in doc:
        raise DataError("the two models share no scored task")
    return doc


def format_comparison(doc: dict) -> str:
    """Aligned plain-text rendering of a :func:`compare_models` document."""
    lines = [f"{doc['a']} (a) vs {doc['b']} (b), n={doc['n']}, {doc['n_boot']} bootstrap replicates, tail={doc['tail']}"]
    row = "{:<14}{:>8}{:>8}{:>9}  {:<17}{:>10}"
    lines.append(row.format("score", "a", "b", "delta", "delta CI", "p"))

    def add(label, blk):
        lo, hi = blk["ci_delta"]
        lines.append(row.format(label, f"{blk['a']:.4f}", f"{blk['b']:.4f}", f"{blk['delta']:+.4f}",
                                f"[{lo:+.3f},{hi:+.3f}]", f"{blk['wilcoxon']['p_value']:.3g}"))

    if "overall" in doc:
        ov = doc["overall"]
        add(ov["metric"], ov)
        for name, v in ov["per_class_f1"].items():
            lines.append(row.format(f"  F1 {name}", f"{v['a']:.4f}", f"{v['b']:.4f}", f"{v['delta']:+.4f}", "", ""))
        for tag in ("a", "b"):
            lines.append(f"row-normalized confusion ({tag}):")
            for r in ov["confusion_normalized"][tag]:
                lines.append("  " + " ".join(f"{x:6.3f}" for x in r))
    if "details" in doc:
        for name, blk in doc["details"].items():
            add(f"F1 {name}", blk)
    lines.extend(doc["notes"])
    return "\n".join(lines) + "\n"


# -- exports ----------------------------------------------------------------------


def _atomic_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)
    return path


def write_confusion_csv(cm: ConfusionMatrix, path, names=(), normalized: bool = False) -> Path:
    names = tuple(names) or tuple(str(c) for c in range(cm.n_classes))
    data = cm.normalized() if normalized else cm.counts
    rows = [[names[i], *(repr(float(v)) if normalized else int(v) for v in data[i])] for i in range(cm.n_classes)]
    return _atomic_csv(path, ["truth\\pred", *names], rows)


def write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def embeddings(net: MultiTaskNet, dataset: Dataset, batch_size: int = 128) -> np.ndarray:
    images = dataset.images()
    z = [net.forward_shared(images[s:s + batch_size]).copy() for s in range(0, len(images), batch_size)]
    return np.concatenate(z) if z else np.zeros((0, net.config.embed_dim))


def class_centroids(net: MultiTaskNet, dataset: Dataset) -> dict[int, np.ndarray]:
    """Mean embedding per overall-quality class."""
    z = embeddings(net, dataset)
    y = dataset.overall()
    return {int(c): z[y == c].mean(axis=0) for c in np.unique(y)}


def export_embeddings(net: MultiTaskNet, dataset: Dataset, path) -> Path:
    """CSV with one row per sample: id, split, z, labels, and the net's predictions."""
    from fmtk.pipeline import predict

    z = embeddings(net, dataset)
    probs_b, probs_a = predict(net, dataset.images())
    dim = z.shape[1]
    header = ["image", "split", *(f"z{k}" for k in range(dim)), "overall", "illum", "clarity", "contrast"]
    if probs_b is not None:
        header += ["pred_overall", *(f"prob_{c}" for c in range(probs_b.shape[1]))]
    if probs_a is not None:
        header += ["pred_illum", "pred_clarity", "pred_contrast"]

    def cell(v):
        return "" if v is None else v

    rows = []
    for i, r in enumerate(dataset.rows):
        rec = [r.image, r.split, *(repr(float(v)) for v in z[i]), cell(r.overall), *(cell(d) for d in r.details)]
        if probs_b is not None:
            rec += [int(np.argmax(probs_b[i])), *(repr(float(p)) for p in probs_b[i])]
        if probs_a is not None:
            rec += [repr(float(p)) for p in probs_a[i]]
        rows.append(rec)
    return _atomic_csv(path, header, rows)
