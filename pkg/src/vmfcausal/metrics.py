"""Evaluation metrics: ECE, reliability bins, macro-F1, AUC, Precision@K."""

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "CalibrationBins",
    "ece",
    "reliability_bins",
    "macro_f1",
    "auc",
    "precision_at_k",
]


@dataclass
class CalibrationBins:
    """Equal-width confidence bins on ``[0, 1]``.

    Empty bins have ``count = 0`` and NaN ``conf``/``acc``.
    """

    edges: np.ndarray
    count: np.ndarray
    conf: np.ndarray
    acc: np.ndarray

    @property
    def k_bins(self):
        return self.count.size

    @property
    def gaps(self):
        """``|acc - conf|`` per occupied bin (NaN for empty bins)."""
        return np.abs(self.acc - self.conf)

    def rows(self):
        """``(bin_low, bin_high, count, conf, acc)`` tuples for CSV output."""
        return [(self.edges[k], self.edges[k + 1], int(self.count[k]),
                 self.conf[k], self.acc[k]) for k in range(self.k_bins)]


def _check_conf(confidences, correctness):
    c = np.asarray(confidences, dtype=float).ravel()
    y = np.asarray(correctness, dtype=float).ravel()
    if c.size != y.size:
        raise ValueError(f"length mismatch: {c.size} vs {y.size}")
    if c.size == 0:
        raise ValueError("empty input")
    if np.any(~np.isfinite(c)) or np.any(c < 0) or np.any(c > 1):
        raise ValueError("confidences must lie in [0, 1]")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("correctness must be 0/1")
    return c, y


def reliability_bins(confidences, correctness, k_bins=15):
    """Bin table behind the reliability diagram.

    Bin ``k`` covers ``(k/K, (k+1)/K]``; confidence exactly 0 goes to the
    first bin.
    """
    c, y = _check_conf(confidences, correctness)
    k_bins = int(k_bins)
    if k_bins < 1:
        raise ValueError("k_bins must be >= 1")
    edges = np.linspace(0.0, 1.0, k_bins + 1)
    # right-closed bins: index = number of interior edges strictly below c
    idx = np.searchsorted(edges[1:-1], c, side="left")
    count = np.bincount(idx, minlength=k_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        conf = np.bincount(idx, weights=c, minlength=k_bins) / count
        acc = np.bincount(idx, weights=y, minlength=k_bins) / count
    return CalibrationBins(edges, count, conf, acc)


def ece(confidences, correctness, k_bins=15):
    """Expected calibration error ``sum_k |B_k|/n |acc(B_k) - conf(B_k)|``."""
    bins = reliability_bins(confidences, correctness, k_bins)
    occ = bins.count > 0
    n = bins.count.sum()
    return float(np.sum(bins.count[occ] / n * bins.gaps[occ]))


def macro_f1(preds, labels, n_classes=None):
    """Unweighted mean of per-class F1 scores.

    Classes absent from both ``preds`` and ``labels`` are skipped.
    """
    p = np.asarray(preds).astype(int).ravel()
    y = np.asarray(labels).astype(int).ravel()
    if p.size != y.size:
        raise ValueError("length mismatch")
    if p.size == 0:
        raise ValueError("empty input")
    if n_classes is None:
        n_classes = int(max(p.max(), y.max())) + 1
    scores = []
    for k in range(n_classes):
        tp = np.sum((p == k) & (y == k))
        fp = np.sum((p == k) & (y != k))
        fn = np.sum((p != k) & (y == k))
        if tp + fp + fn == 0:
            continue
        scores.append(2.0 * tp / (2.0 * tp + fp + fn))
    return float(np.mean(scores))


def auc(scores, labels):
    """Area under the ROC curve by the Mann-Whitney rank statistic.

    Ties receive mid-ranks (counted as one half).
    """
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).astype(int).ravel()
    if s.size != y.size:
        raise ValueError("length mismatch")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    r = rankdata(s)
    return float((r[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def precision_at_k(predicted, truth, k=10):
    """Fraction of the top ``k`` ranked ``(src, dst)`` edges found in ``truth``."""
    predicted = [tuple(map(int, e)) for e in predicted]
    if len(predicted) < k:
        raise ValueError(f"need at least {k} predictions, got {len(predicted)}")
    truth = {tuple(map(int, e)) for e in truth}
    return sum(e in truth for e in predicted[:k]) / float(k)
