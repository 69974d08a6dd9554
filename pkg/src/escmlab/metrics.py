"""Ranking metrics: AUC (midrank), KS, recall at the Youden point, max F1."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import LengthMismatchError, UndefinedMetricError


def _check(labels, scores):
    y = np.asarray(labels, dtype=np.float64).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise LengthMismatchError("labels and scores differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise UndefinedMetricError("labels must be 0/1")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise UndefinedMetricError("both classes must be present")
    return y, s


def auc(labels, scores) -> float:
    y, s = _check(labels, scores)
    ranks = rankdata(s)
    n_pos = y.sum()
    n_neg = y.size - n_pos
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _curve(y, s):
    """Cumulative (tp, fp) at each distinct threshold, highest score first."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), y.size - 1]
    tp = np.cumsum(y_sorted)[last]
    fp = (last + 1) - tp
    return tp, fp, s_sorted[last]


def rank_metrics(labels, scores) -> dict:
    """AUC, KS, recall and F1 for one scored task.

    Recall is read at the threshold maximising TPR - FPR (the KS point);
    F1 is the maximum over all thresholds.
    """
    y, s = _check(labels, scores)
    n_pos = y.sum()
    n_neg = y.size - n_pos
    tp, fp, thresholds = _curve(y, s)
    tpr = tp / n_pos
    fpr = fp / n_neg
    youden = tpr - fpr
    best = int(np.argmax(youden))
    f1 = 2.0 * tp / (tp + fp + n_pos)
    return {
        "auc": auc(y, s),
        "ks": float(np.max(np.abs(youden))),
        "recall": float(tpr[best]),
        "f1": float(np.max(f1)),
        "ks_threshold": float(thresholds[best]),
    }
