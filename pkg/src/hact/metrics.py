"""Confusion-matrix metrics: per-class precision/recall/F1 and support-weighted F1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    for name, y in (("true", y_true), ("predicted", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= n_classes):
            raise ValueError(f"{name} label outside 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # 0/0 (a class never predicted, or never present) counts as a score of 0
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass
class Metrics:
    confusion: np.ndarray
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray
    weighted_f1: float
    accuracy: float
    class_names: list[str] | None = None

    @property
    def support(self) -> np.ndarray:
        return self.confusion.sum(axis=1)

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "per_class_f1": self.per_class_f1.tolist(),
            "per_class_precision": self.per_class_precision.tolist(),
            "per_class_recall": self.per_class_recall.tolist(),
            "support": self.support.tolist(),
            "confusion": self.confusion.tolist(),
            "class_names": self.class_names,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Metrics":
        return weighted_f1(np.asarray(obj["confusion"], dtype=np.int64), obj.get("class_names"))

    def format_table(self) -> str:
        """Confusion counts with recall per row and precision per column."""
        c = self.confusion.shape[0]
        names = self.class_names or [str(i) for i in range(c)]
        width = max(9, max(len(n) for n in names) + 1)
        header = "true\\pred".ljust(width) + "".join(n.rjust(width) for n in names) + "recall".rjust(width)
        lines = [header]
        for i in range(c):
            row = names[i].ljust(width) + "".join(str(v).rjust(width) for v in self.confusion[i])
            lines.append(row + f"{self.per_class_recall[i]:.3f}".rjust(width))
        lines.append("precision".ljust(width) + "".join(f"{p:.3f}".rjust(width) for p in self.per_class_precision))
        lines.append(f"accuracy {self.accuracy:.4f}  weighted F1 {self.weighted_f1:.4f}")
        return "\n".join(lines)


def weighted_f1(confusion, class_names: list[str] | None = None) -> Metrics:
    cm = np.asarray(confusion, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    if np.any(cm < 0):
        raise ValueError("confusion counts must be nonnegative")
    total = cm.sum()
    if total < 1:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, support)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return Metrics(
        confusion=cm,
        per_class_precision=precision,
        per_class_recall=recall,
        per_class_f1=f1,
        weighted_f1=float(np.dot(support / total, f1)),
        accuracy=float(tp.sum() / total),
        class_names=list(class_names) if class_names is not None else None,
    )


def metrics_from_predictions(y_true, y_pred, n_classes: int, class_names=None) -> Metrics:
    return weighted_f1(confusion_matrix(y_true, y_pred, n_classes), class_names)
