"""Classification metrics: accuracy, per-class accuracy, confusion matrix, rank-k."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Counts with true classes on rows and predicted classes on columns."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def per_class_accuracy(cm: np.ndarray) -> np.ndarray:
    """Diagonal over row sums; NaN for classes absent from the data."""
    totals = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(totals > 0, np.diag(cm) / np.maximum(totals, 1), np.nan)


def rank_k_accuracy(scores: np.ndarray, labels, k: int) -> float:
    """Fraction of rows whose true class is among the ``k`` best scores (ties favour lower indices)."""
    scores = np.atleast_2d(scores)
    if k < 1:
        raise ValueError("k must be positive")
    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(top == np.asarray(labels)[:, None], axis=1)))


@dataclass
class MetricsReport:
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray
    rank: dict[int, float] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.confusion.sum())

    def to_csv(self) -> str:
        lines = ["metric,value", f"accuracy,{self.accuracy!r}", f"n,{self.n}"]
        lines += [f"rank{k},{v!r}" for k, v in sorted(self.rank.items())]
        lines += [f"class{c}_accuracy,{float(v)!r}" for c, v in enumerate(self.per_class)]
        lines += [f"confusion_{t}_{p},{int(self.confusion[t, p])}"
                  for t in range(self.confusion.shape[0]) for p in range(self.confusion.shape[1])]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        k = self.confusion.shape[0]
        width = max(5, len(str(self.confusion.max())) + 1)
        out = [f"accuracy  {100 * self.accuracy:.2f}%  (error {100 * (1 - self.accuracy):.2f}%, n={self.n})"]
        out += [f"rank-{r:<3}  {100 * v:.2f}%" for r, v in sorted(self.rank.items())]
        out.append("")
        out.append("true\\pred " + "".join(f"{p:>{width}}" for p in range(k)) + "   class acc")
        for t in range(k):
            acc = self.per_class[t]
            acc_text = "     -" if np.isnan(acc) else f"{100 * acc:6.2f}%"
            out.append(f"{t:>9} " + "".join(f"{int(c):>{width}}" for c in self.confusion[t]) + f"   {acc_text}")
        return "\n".join(out) + "\n"


def evaluate_predictions(posteriors: np.ndarray, labels, n_classes: int, ranks=()) -> MetricsReport:
    posteriors = np.atleast_2d(posteriors)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("no samples to evaluate")
    pred = np.argmax(posteriors, axis=1)
    cm = confusion_matrix(labels, pred, n_classes)
    return MetricsReport(float(np.mean(pred == labels)), per_class_accuracy(cm), cm,
                         {int(k): rank_k_accuracy(posteriors, labels, int(k)) for k in ranks})
