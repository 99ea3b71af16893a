"""Open-set accuracy metrics: per-class accuracy, OS*, UNK and HOS."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import UNKNOWN_SENTINEL


def harmonic_mean(a: float, b: float) -> float:
    return 0.0 if a + b == 0 else 2.0 * a * b / (a + b)


@dataclass
class MetricsReport:
    per_class_acc: dict[int, float]
    os_star: float
    unk: float | None
    hos: float | None
    confusion: np.ndarray  # (C+1, C+1), last row/col = Unknown

    def to_json(self) -> dict:
        return {
            "per_class": {str(c): v for c, v in self.per_class_acc.items()},
            "os_star": self.os_star,
            "unk": self.unk,
            "hos": self.hos,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def confusion_matrix(predictions, truth, n_classes: int) -> np.ndarray:
    """Counts with rows = truth, cols = prediction; index n_classes is Unknown."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError("predictions and truth differ in length")

    def index(a):
        idx = np.where(a == UNKNOWN_SENTINEL, n_classes, a - 1)
        if np.any((idx < 0) | (idx > n_classes)):
            raise ValueError(f"labels must be 1..{n_classes} or UNKNOWN_SENTINEL")
        return idx

    cm = np.zeros((n_classes + 1, n_classes + 1), dtype=np.int64)
    np.add.at(cm, (index(true), index(pred)), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> MetricsReport:
    n_classes = cm.shape[0] - 1
    per_class = {}
    for c in range(n_classes):
        total = cm[c].sum()
        if total == 0:
            raise ValueError(f"class {c + 1} has no ground-truth samples")
        per_class[c + 1] = float(cm[c, c] / total)
    os_star = float(np.mean(list(per_class.values())))
    unk_total = cm[n_classes].sum()
    if unk_total == 0:
        unk = hos = None
    else:
        unk = float(cm[n_classes, n_classes] / unk_total)
        hos = harmonic_mean(os_star, unk)
    return MetricsReport(per_class, os_star, unk, hos, cm)


def compute_metrics(predictions, truth, n_classes: int) -> MetricsReport:
    """Metrics for per-sample predictions vs truth.

    Classes are 1..n_classes; UNKNOWN_SENTINEL marks Unknown in both arrays.
    A known sample predicted Unknown counts as an error for its class. UNK
    and HOS are None when the truth has no unknown samples.
    """
    if len(truth) == 0:
        raise ValueError("empty truth")
    return metrics_from_confusion(confusion_matrix(predictions, truth, n_classes))
