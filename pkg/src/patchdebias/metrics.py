"""Classification metrics: accuracy, macro F1, macro one-vs-rest AUC.

AUC uses the Mann-Whitney rank statistic with ties counted 0.5, computed via
average ranks; this is exactly equal to pairwise comparison.
"""

from __future__ import annotations

import numpy as np

from .errors import MetricUndefinedError


def accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("accuracy of an empty batch is undefined")
    return float(np.mean(pred == truth))


def macro_f1(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> float:
    """Unweighted mean over all classes of 2PR/(P+R).

    A class with P+R = 0 (absent from both pred and truth, or never correct)
    contributes 0 to the average.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("F1 of an empty batch is undefined")
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    for arr, name in ((pred, "pred"), (truth, "truth")):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError(f"{name} labels must lie in [0, {n_classes})")
    f1s = []
    for k in range(n_classes):
        tp = int(np.sum((pred == k) & (truth == k)))
        fp = int(np.sum((pred == k) & (truth != k)))
        fn = int(np.sum((pred != k) & (truth == k)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(
            2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
        )
    return float(np.mean(f1s))


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged; exact for the Mann-Whitney statistic."""
    n = scores.shape[0]
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    _, starts, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    avg = starts + (counts + 1) / 2.0  # mean of ranks start+1 .. start+count
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(avg, counts)
    return ranks


def binary_rank_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """AUC of `scores` for the boolean positive mask, ties counted 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = int(positive.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC needs at least one positive and one negative")
    ranks = _average_ranks(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_ovr_auc(scores: np.ndarray, truth: np.ndarray) -> float:
    """Macro one-vs-rest AUC over classes that have both positives and negatives.

    Classes without a positive or without a negative in `truth` are skipped;
    if no class is computable a MetricUndefinedError is raised.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise ValueError("scores must be (N, K) with K >= 2")
    if truth.shape != (scores.shape[0],):
        raise ValueError("truth length must match score rows")
    if truth.min() < 0 or truth.max() >= scores.shape[1]:
        raise ValueError(f"labels must lie in [0, {scores.shape[1]})")
    row_sums = scores.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise ValueError("score rows must sum to 1 within 1e-6")
    aucs = []
    for k in range(scores.shape[1]):
        positive = truth == k
        n_pos = int(positive.sum())
        if n_pos == 0 or n_pos == truth.shape[0]:
            continue
        aucs.append(binary_rank_auc(scores[:, k], positive))
    if not aucs:
        raise MetricUndefinedError("no class has both positives and negatives")
    return float(np.mean(aucs))
