"""Evaluation: confusion matrix, one-vs-rest ROC/AUC, comparison report CSV."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [k, k]; rows = true class, columns = predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


@dataclass
class ComparisonRow:
    classifier: str
    training_time_s: float
    testing_time_s: float
    accuracy_percent: float

    def __post_init__(self):
        if self.training_time_s < 0 or self.testing_time_s < 0:
            raise DataError("times must be >= 0")
        if not 0.0 <= self.accuracy_percent <= 100.0:
            raise DataError(f"accuracy_percent out of range: {self.accuracy_percent}")


def confusion_matrix(true_labels, predicted_labels, k) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise ShapeError(f"label lists differ in length: {t.shape} vs {p.shape}")
    if len(t) and (t.min() < 0 or t.max() >= k or p.min() < 0 or p.max() >= k):
        raise ShapeError(f"labels outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def accuracy(true_labels, predicted_labels) -> float:
    t = np.asarray(true_labels)
    p = np.asarray(predicted_labels)
    return float((t == p).mean())


def roc_auc_ovr(scores, true_labels, class_index) -> RocCurve:
    """One-vs-rest ROC for one class: exact sweep over sorted unique scores,
    AUC by the trapezoidal rule (equals pairwise concordance with ties at 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(true_labels, dtype=np.int64)
    s = scores[:, class_index] if scores.ndim == 2 else scores
    pos = labels == class_index
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError(f"class {class_index} needs at least one positive and one negative sample")
    order = np.argsort(-s, kind="stable")
    s_sorted, pos_sorted = s[order], pos[order]
    tp = np.cumsum(pos_sorted)
    fp = np.cumsum(~pos_sorted)
    # keep only the last index of each unique score (threshold boundaries)
    boundary = np.flatnonzero(np.diff(s_sorted) != 0)
    keep = np.concatenate([boundary, [len(s_sorted) - 1]])
    tpr = np.concatenate([[0.0], tp[keep] / n_pos])
    fpr = np.concatenate([[0.0], fp[keep] / n_neg])
    trapezoid = getattr(np, "trapezoid", np.trapz)
    auc = float(trapezoid(tpr, fpr))
    return RocCurve(fpr, tpr, auc)


def macro_auc(scores, true_labels, k) -> float:
    return float(np.mean([roc_auc_ovr(scores, true_labels, c).auc for c in range(k)]))


def comparison_report(rows: list[ComparisonRow], out_path) -> None:
    """Table-style comparison CSV: one row per model plus both fusion modes."""
    if not rows:
        raise DataError("comparison_report needs at least one row")
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["classifier", "training_time_s", "testing_time_s", "accuracy_percent"])
        for r in rows:
            writer.writerow([r.classifier, f"{r.training_time_s:.2f}", f"{r.testing_time_s:.2f}",
                             f"{r.accuracy_percent:.2f}"])


def read_comparison(path) -> list[ComparisonRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["classifier", "training_time_s", "testing_time_s", "accuracy_percent"]:
            raise DataError(f"unexpected comparison header {header}")
        return [ComparisonRow(name, float(tr), float(te), float(acc))
                for name, tr, te, acc in reader]


def training_curves(history, out_path) -> None:
    """Per-epoch CSV of (epoch, train_acc, val_acc, train_loss, val_loss)."""
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_acc", "val_acc", "train_loss", "val_loss"])
        for rec in history:
            writer.writerow([rec.epoch, f"{rec.train_acc:.6f}", f"{rec.val_acc:.6f}",
                             f"{rec.train_loss:.6f}", f"{rec.val_loss:.6f}"])
