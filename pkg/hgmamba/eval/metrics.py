"""
Slide level classification metrics: accuracy, macro F1, rank based AUC and the confusion matrix
"""
import dataclasses
from typing import Dict, Optional

import numpy as np
from scipy.stats import rankdata

# Project Imports
from hgmamba.common.errors import DimensionError
from hgmamba.common.utils import check_tensor


@dataclasses.dataclass
class Metrics:
    acc: float
    macro_f1: float
    auc: Optional[float]  # None when undefined (single class split)
    confusion: np.ndarray  # [C, C], rows are the true labels
    class_counts: np.ndarray  # [C] number of samples of every class

    @property
    def n_samples(self) -> int:
        return int(self.confusion.sum())

    def as_dict(self) -> Dict[str, object]:
        values = {"acc": self.acc, "macro_f1": self.macro_f1, "auc": self.auc, "n_samples": self.n_samples}
        for c, count in enumerate(self.class_counts):
            values[f"count_{c}"] = int(count)
        for true in range(self.confusion.shape[0]):
            for pred in range(self.confusion.shape[1]):
                values[f"confusion_{true}_{pred}"] = int(self.confusion[true, pred])
        return values


def binary_auc(labels: np.ndarray, scores: np.ndarray) -> Optional[float]:
    """
    Mann-Whitney estimate of P(score of a positive > score of a negative), ties count for 1/2

    `labels` are booleans (positive class). Returns None if one of the classes is empty.
    """
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auc(labels: np.ndarray, probabilities: np.ndarray) -> Optional[float]:
    """Binary AUC of the positive class for C = 2, the mean of the defined one-vs-rest AUCs otherwise"""
    n_classes = probabilities.shape[1]
    if n_classes == 2:
        return binary_auc(labels == 1, probabilities[:, 1])
    aucs = [binary_auc(labels == c, probabilities[:, c]) for c in range(n_classes)]
    aucs = [auc for auc in aucs if auc is not None]
    if not aucs:
        return None
    return float(np.mean(aucs))


def confusion_matrix(labels: np.ndarray, predictions: np.ndarray, n_classes: int) -> np.ndarray:
    flat = labels.astype(np.int64) * n_classes + predictions.astype(np.int64)
    return np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def macro_f1(confusion: np.ndarray) -> float:
    """Mean over the classes of 2TP / (2TP + FP + FN), a class with a zero denominator scores 0"""
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    denominator = 2 * tp + fp + fn
    f1 = np.zeros_like(tp)
    nonzero = denominator > 0
    f1[nonzero] = 2 * tp[nonzero] / denominator[nonzero]
    return float(f1.mean())


def compute_metrics(labels: np.ndarray, probabilities: np.ndarray) -> Metrics:
    """
    Computes the metrics of the predicted class probabilities [n, C] against the labels [n]

    The predicted label is the argmax of the probabilities (lowest index on ties).
    """
    labels = np.asarray(labels, dtype=np.int64)
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if probabilities.ndim != 2 or labels.shape[0] == 0:
        raise DimensionError(f"Expected probabilities [n > 0, C], got {probabilities.shape}")
    check_tensor(labels, [probabilities.shape[0]], DimensionError)
    n_classes = probabilities.shape[1]

    predictions = np.argmax(probabilities, axis=1)
    confusion = confusion_matrix(labels, predictions, n_classes)
    return Metrics(acc=float(np.mean(predictions == labels)),
                   macro_f1=macro_f1(confusion),
                   auc=macro_auc(labels, probabilities),
                   confusion=confusion,
                   class_counts=confusion.sum(axis=1))
