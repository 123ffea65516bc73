"""Classification metrics: rank-based AUC with tie handling, accuracy, F1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UndefinedMetricError


@dataclass
class Metrics:
    auc: float | None
    acc: float
    f1: float
    n_pos: int
    n_neg: int
    threshold: float

    def as_dict(self) -> dict:
        return {"auc": self.auc, "acc": self.acc, "f1": self.f1,
                "n_pos": self.n_pos, "n_neg": self.n_neg, "threshold": self.threshold}


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score+ > score-) + 0.5 P(score+ = score-).

    Computed from average ranks so ties contribute exactly one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores and labels must be aligned 1-D, got {scores.shape} vs {labels.shape}")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average of 1-based ranks
        i = j + 1
    r_pos = float(ranks[labels == 1].sum())
    u = r_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def acc_f1(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    """Accuracy and positive-class F1 at a fixed decision threshold.

    Predictions are score >= threshold; F1 is 0 when precision + recall is 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    preds = (scores >= threshold).astype(int)
    acc = float((preds == labels).mean())
    tp = int(((preds == 1) & (labels == 1)).sum())
    fp = int(((preds == 1) & (labels == 0)).sum())
    fn = int(((preds == 0) & (labels == 1)).sum())
    if 2 * tp + fp + fn == 0:
        return acc, 0.0
    return acc, 2.0 * tp / (2 * tp + fp + fn)


def compute_metrics(scores, labels, threshold: float = 0.5) -> Metrics:
    """AUC/ACC/F1 bundle; AUC is None (not 0) when only one class is present."""
    labels = np.asarray(labels, dtype=int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    try:
        a = auc(scores, labels)
    except UndefinedMetricError:
        a = None
    acc, f1 = acc_f1(scores, labels, threshold)
    return Metrics(auc=a, acc=acc, f1=f1, n_pos=n_pos, n_neg=n_neg, threshold=threshold)
