"""Detection metrics over labeled score sets.

Label convention everywhere: 0 = in-distribution, 1 = out-of-distribution.
In-distribution is the positive class; higher scores mean "more in".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from oodlinear.errors import ShapeError, UndefinedMetricError


@dataclass(frozen=True)
class EvalReport:
    fpr95: float
    auroc: float
    aupr: float
    n_in: int
    n_out: int


def split_by_label(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a score vector into (in_scores, out_scores) by 0/1 labels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or labels.shape != scores.shape:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} must be equal-length 1-d")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite entries")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 (in) or 1 (out)")
    in_scores = scores[labels == 0]
    out_scores = scores[labels == 1]
    if in_scores.size == 0 or out_scores.size == 0:
        raise UndefinedMetricError(
            f"need both classes, got {in_scores.size} in / {out_scores.size} out"
        )
    return in_scores, out_scores


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the group mean rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """P(random in-sample outscores random out-sample), ties counted half.

    Computed as the Mann-Whitney U statistic over average ranks, which
    equals the exact O(n^2) pairwise count.
    """
    in_scores, out_scores = split_by_label(scores, labels)
    n_in, n_out = in_scores.size, out_scores.size
    ranks = _average_ranks(np.concatenate([in_scores, out_scores]))
    u = np.sum(ranks[:n_in]) - n_in * (n_in + 1) / 2.0
    return float(u / (n_in * n_out))


def fpr_at_tpr(scores: np.ndarray, labels: np.ndarray, tpr_target: float = 0.95) -> float:
    """False-positive rate at the given true-positive rate.

    The threshold is the largest observed in-score g with
    mean(in >= g) >= tpr_target; no interpolation between observed
    scores.  Returns the fraction of out-samples scoring >= g.
    """
    if not 0.0 < tpr_target <= 1.0:
        raise ValueError(f"tpr_target must be in (0, 1], got {tpr_target}")
    in_scores, out_scores = split_by_label(scores, labels)
    candidates = np.unique(in_scores)  # ascending
    n_in = in_scores.size
    # count of in-scores >= each candidate, via positions in the sorted array
    ge_counts = n_in - np.searchsorted(np.sort(in_scores), candidates, side="left")
    feasible = candidates[ge_counts / n_in >= tpr_target]
    threshold = feasible[-1]  # tpr is nonincreasing in the threshold, so max feasible exists
    return float(np.mean(out_scores >= threshold))


def aupr(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the precision-recall curve, in-distribution positive.

    Step-wise summation AP = sum_k (R_k - R_{k-1}) * P_k over descending
    unique score thresholds; no interpolation.
    """
    in_scores, out_scores = split_by_label(scores, labels)
    n_in = in_scores.size
    thresholds = np.unique(np.concatenate([in_scores, out_scores]))[::-1]
    sorted_in = np.sort(in_scores)
    sorted_out = np.sort(out_scores)
    tp = n_in - np.searchsorted(sorted_in, thresholds, side="left")
    fp = out_scores.size - np.searchsorted(sorted_out, thresholds, side="left")
    precision = tp / (tp + fp)
    recall = tp / n_in
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def evaluate(scores: np.ndarray, labels: np.ndarray, tpr_target: float = 0.95) -> EvalReport:
    """All three metrics in one report."""
    in_scores, out_scores = split_by_label(scores, labels)
    return EvalReport(
        fpr95=fpr_at_tpr(scores, labels, tpr_target),
        auroc=auroc(scores, labels),
        aupr=aupr(scores, labels),
        n_in=int(in_scores.size),
        n_out=int(out_scores.size),
    )
