"""Classification and regression metrics computed over masked pixel maps.

All functions take flat or multidimensional arrays and reduce over every
element that survives the ignore filter or the validity mask.  Classification
metrics are derived from a single confusion matrix so the per-class, micro,
and macro views stay mutually consistent.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .losses import IGNORE_ID

__all__ = [
    "confusion_matrix",
    "per_class_rates",
    "row_normalized",
    "classification_report",
    "micro_accuracy",
    "macro_accuracy",
    "binary_auc",
    "macro_auc",
    "regression_metrics",
    "error_histogram",
]


def confusion_matrix(true, pred, classes, ignore=IGNORE_ID):
    """Count (reference, prediction) pairs into a classes x classes matrix.

    Rows index the reference class, columns the predicted class.  Elements
    whose reference equals ``ignore`` are dropped; a prediction outside
    ``[0, classes)`` on a counted element is an error.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    t = np.asarray(true).ravel()
    p = np.asarray(pred).ravel()
    if t.shape != p.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {p.shape}")
    keep = t != ignore
    t = t[keep].astype(np.int64)
    p = p[keep].astype(np.int64)
    if t.size == 0:
        raise ValueError("no elements left after ignore filtering")
    if t.min() < 0 or t.max() >= classes:
        raise ValueError("reference label out of range")
    if p.min() < 0 or p.max() >= classes:
        raise ValueError("predicted label out of range")
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def per_class_rates(cm):
    """Precision, recall, and F1 per class from a confusion matrix.

    Returns a dict of arrays keyed ``precision``, ``recall``, ``f1``,
    ``support``.  A rate whose denominator is zero is absent, reported as
    NaN and excluded from macro averages; F1 is 0, not absent, when both
    components are defined but the class was never predicted correctly.
    """
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, tp / predicted, np.nan)
        recall = np.where(support > 0, tp / support, np.nan)
        denom = precision + recall
        f1 = np.where(np.isnan(denom), np.nan,
                      np.where(denom > 0,
                               2 * precision * recall / np.where(denom > 0, denom, 1.0),
                               0.0))
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "support": support.astype(np.int64),
    }


def micro_accuracy(cm):
    """Fraction of all counted elements on the diagonal."""
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm) / total)


def macro_accuracy(cm):
    """Mean per-class recall over classes present in the reference."""
    rates = per_class_rates(cm)
    present = rates["support"] > 0
    if not present.any():
        raise ValueError("no class has reference support")
    return float(rates["recall"][present].mean())


def row_normalized(cm):
    """Confusion matrix with each supported row rescaled to sum to 1."""
    cm = np.asarray(cm, dtype=np.float64)
    support = cm.sum(axis=1, keepdims=True)
    return np.divide(cm, support, out=np.zeros_like(cm), where=support > 0)


def classification_report(cm):
    """Per-class and aggregate rates from one confusion matrix.

    Macro precision/recall/F1 average only the defined (non-NaN) cells.
    """
    rates = per_class_rates(cm)
    macro = {}
    for k in ("precision", "recall", "f1"):
        defined = rates[k][~np.isnan(rates[k])]
        macro[k] = float(defined.mean()) if defined.size else float("nan")
    return {
        "per_class": rates,
        "macro_precision": macro["precision"],
        "macro_recall": macro["recall"],
        "macro_f1": macro["f1"],
        "micro_accuracy": micro_accuracy(cm),
        "macro_accuracy": macro_accuracy(cm),
    }


def binary_auc(scores, labels):
    """Probability a positive outscores a negative, ties counted half.

    Computed from the rank statistic: with average ranks R over all scores,
    AUC = (sum of positive ranks - n_pos(n_pos+1)/2) / (n_pos * n_neg).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {y.shape}")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative")
    ranks = rankdata(s, method="average")
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def macro_auc(scores, labels, ignore=IGNORE_ID):
    """Mean one-vs-rest AUC over classes with both positives and negatives.

    ``scores`` holds one column of class scores per element, shape (N, C);
    ``labels`` holds N reference ids.  Classes missing a positive or a
    negative after ignore filtering are skipped.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).ravel()
    if s.ndim != 2 or s.shape[0] != y.size:
        raise ValueError(f"scores shape {s.shape} does not match {y.size} labels")
    keep = y != ignore
    s = s[keep]
    y = y[keep].astype(np.int64)
    if y.size == 0:
        raise ValueError("no elements left after ignore filtering")
    values = []
    for c in range(s.shape[1]):
        pos = y == c
        if pos.any() and (~pos).any():
            values.append(binary_auc(s[:, c], pos))
    if not values:
        raise ValueError("no class has both positives and negatives")
    return float(np.mean(values))


def _masked_pair(pred, true, mask):
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(true, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool).ravel()
        if m.shape != p.shape:
            raise ValueError(f"mask shape {m.shape} does not match {p.shape}")
        p, t = p[m], t[m]
    if p.size == 0:
        raise ValueError("no elements left after masking")
    if not (np.isfinite(p).all() and np.isfinite(t).all()):
        raise ValueError("non-finite values")
    return p, t


def regression_metrics(pred, true, mask=None):
    """RMSE, MAE, coefficient of determination, and Pearson correlation.

    A constant reference leaves the last two undefined; a constant
    prediction leaves only the correlation undefined.  Undefined values are
    reported as NaN, never silently 0.
    """
    p, t = _masked_pair(pred, true, mask)
    err = p - t
    rmse = float(np.sqrt(np.mean(err**2)))
    mae = float(np.mean(np.abs(err)))
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    r2 = 1.0 - float(np.sum(err**2)) / ss_tot if ss_tot > 0.0 else float("nan")
    pc = p - p.mean()
    tc = t - t.mean()
    denom = np.sqrt(np.sum(pc**2) * np.sum(tc**2))
    pearson = float(np.sum(pc * tc) / denom) if denom > 0.0 else float("nan")
    return {"rmse": rmse, "mae": mae, "r2": r2, "pearson": pearson}


def error_histogram(pred, true, mask=None, bins=100):
    """Absolute-error counts over ``bins`` equal bins spanning [0, max error].

    Returns (edges, counts) with len(edges) == bins + 1.  An all-zero error
    vector spans [0, 1] so the bins stay well defined.
    """
    if bins < 1:
        raise ValueError(f"bins must be positive, got {bins}")
    p, t = _masked_pair(pred, true, mask)
    err = np.abs(p - t)
    top = float(err.max())
    if top == 0.0:
        top = 1.0
    counts, edges = np.histogram(err, bins=bins, range=(0.0, top))
    return edges, counts
