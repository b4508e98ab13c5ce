"""Matthews correlation coefficient and per-track Pearson correlation."""
from __future__ import annotations

import math

import numpy as np


def mcc_binary(tp, tn, fp, fn):
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0:
        return 0.0
    return float((tp * tn - fp * fn) / math.sqrt(den))


def mcc_multiclass(C):
    """K-class MCC from a confusion matrix with C[i, j] = class i predicted as j.

    Numerator Σ_klm C_kk C_lm - C_kl C_mk; each denominator factor pairs the
    row (resp. column) total of class k with the mass of all other rows
    (resp. columns). Reduces to the binary formula for K = 2.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1] or C.shape[0] < 2:
        raise ValueError(f"need a square KxK confusion matrix with K >= 2, got {C.shape}")
    if np.any(C < 0):
        raise ValueError("confusion counts must be non-negative")
    n = C.sum()
    rows = C.sum(axis=1)
    cols = C.sum(axis=0)
    num = n * np.trace(C) - np.dot(rows, cols)
    den_a = np.dot(rows, n - rows)
    den_b = np.dot(cols, n - cols)
    if den_a == 0 or den_b == 0:
        return 0.0
    return float(num / math.sqrt(den_a * den_b))


def mcc_multiclass_triple_sum(C):
    """Literal triple-sum evaluation of the K-class MCC (slow, for cross-checking)."""
    C = np.asarray(C, dtype=np.float64)
    K = C.shape[0]
    num = 0.0
    for k in range(K):
        for l in range(K):
            for m in range(K):
                num += C[k, k] * C[l, m] - C[k, l] * C[m, k]
    a = b = 0.0
    for k in range(K):
        row_k = sum(C[k, l] for l in range(K))
        col_k = sum(C[l, k] for l in range(K))
        a += row_k * sum(C[f, g] for f in range(K) if f != k for g in range(K))
        b += col_k * sum(C[g, f] for f in range(K) if f != k for g in range(K))
    if a == 0 or b == 0:
        return 0.0
    return num / math.sqrt(a * b)


def confusion_matrix(labels, preds, K):
    C = np.zeros((K, K), dtype=np.int64)
    np.add.at(C, (np.asarray(labels), np.asarray(preds)), 1)
    return C


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt((da * da).sum()), np.sqrt((db * db).sum())
    if sa == 0 or sb == 0:
        return None
    return float((da * db).sum() / (sa * sb))


def pearson_per_track(pred, target):
    """Pearson r per track over all positions; ``pred``/``target`` are [n, C, L] or [n, L].

    Constant tracks yield None.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.ndim == 2:
        return [pearson(pred, target)]
    return [pearson(pred[:, c], target[:, c]) for c in range(pred.shape[1])]


def _nanless_mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize_pearson(per_track, track_types):
    """Group per-track correlations by assay type and overall, skipping nulls."""
    by_type = {}
    for r, a in zip(per_track, track_types):
        by_type.setdefault(a, []).append(r)
    return {"per_assay_type": {a: _nanless_mean(v) for a, v in by_type.items()},
            "overall": _nanless_mean(per_track)}
