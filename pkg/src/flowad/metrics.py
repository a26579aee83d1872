"""Detection metrics: score normalization, exact and soft AUC, ROC curves.

Scores and truth masks are arrays of equal shape; ``truth`` marks the
ground-truth anomalies with 1. Functions that feed the training loss also
accept ``torch.Tensor`` scores and then stay differentiable.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np
import scipy.special
import scipy.stats
import torch


class UndefinedMetricError(ValueError):
    """Raised when one of the two label classes is empty."""


@dataclass(frozen=True)
class LabeledScores:
    scores: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        if np.shape(self.scores) != np.shape(self.truth):
            raise ValueError("scores and truth must have the same shape")

    def classes(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat (C-order) indices of the positives and the negatives."""
        t = np.asarray(self.truth).ravel()
        if not np.all((t == 0) | (t == 1)):
            raise ValueError("truth mask must be binary")
        pos, neg = np.flatnonzero(t == 1), np.flatnonzero(t == 0)
        if pos.size == 0 or neg.size == 0:
            raise UndefinedMetricError("AUC needs at least one positive and one negative")
        return pos, neg


def normalize_scores(a):
    """``|a| / max|a|``; an all-zero input maps to all zeros."""
    if isinstance(a, torch.Tensor):
        mag = a.abs()
        peak = mag.max()
        return mag / peak if peak > 0 else torch.zeros_like(mag)
    mag = np.abs(np.asarray(a, dtype=np.float64))
    peak = mag.max() if mag.size else 0.0
    return mag / peak if peak > 0 else np.zeros_like(mag)


def auc(scores, truth) -> float:
    """Exact pairwise AUC with ties counted as one half (rank-sum form)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    pos, neg = LabeledScores(s, np.asarray(truth).ravel()).classes()
    ranks = scipy.stats.rankdata(s)
    n1, n0 = pos.size, neg.size
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def _pairwise_mean(s1, s0, beta):
    """Mean of the logistic ``S_beta(s1_a - s0_b)`` over all pairs."""
    if isinstance(s1, torch.Tensor):
        diff = s1[:, None] - s0[None, :]
        return torch.sigmoid(beta * diff).mean()
    diff = s1[:, None] - s0[None, :]
    vals = scipy.special.expit(beta * diff)
    return math.fsum(vals.ravel()) / vals.size


def soft_auc(scores, truth, beta: float):
    """Logistic surrogate of the pairwise AUC with slope ``beta``."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    pos, neg = LabeledScores(np.zeros(np.shape(truth)), np.asarray(truth)).classes()
    s = _flat(scores)
    return _pairwise_mean(s[_index(s, pos)], s[_index(s, neg)], beta)


def _flat(scores):
    if isinstance(scores, torch.Tensor):
        return scores.reshape(-1)
    return np.asarray(scores, dtype=np.float64).ravel()


def _index(s, idx):
    return torch.as_tensor(idx) if isinstance(s, torch.Tensor) else idx


def partition_indices(indices, K: int) -> list[np.ndarray]:
    """Split ``indices`` into ``K`` disjoint parts of near-equal size.

    Indices are sorted (C-order flat index, i.e. lexicographic in
    ``(flow, t1, t2)``) and dealt out round-robin, so the split is deterministic
    and part sizes differ by at most one.
    """
    idx = np.sort(np.asarray(indices, dtype=np.int64).ravel())
    if K < 1:
        raise ValueError("K must be at least 1")
    if K > idx.size:
        raise ValueError(f"cannot split {idx.size} items into {K} non-empty parts")
    return [idx[k::K] for k in range(K)]


def subsampled_soft_auc(scores, truth, beta: float, K: int, counter: Counter | None = None):
    """Average over ``K`` paired partitions of the per-block soft AUC.

    ``counter["pairs"]`` (if given) is incremented by the number of score pairs
    evaluated.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    pos, neg = LabeledScores(np.zeros(np.shape(truth)), np.asarray(truth)).classes()
    parts1, parts0 = partition_indices(pos, K), partition_indices(neg, K)
    s = _flat(scores)
    terms = []
    for p1, p0 in zip(parts1, parts0):
        terms.append(_pairwise_mean(s[_index(s, p1)], s[_index(s, p0)], beta))
        if counter is not None:
            counter["pairs"] += p1.size * p0.size
    if isinstance(s, torch.Tensor):
        return torch.stack(terms).mean()
    return math.fsum(terms) / K


def roc_curve(scores, truth) -> list[tuple[float, float]]:
    """ROC points ``(p_false_alarm, p_detection)`` from ``(0, 0)`` to ``(1, 1)``.

    Thresholds sweep the unique score values from the top; a tie group moves
    the curve diagonally, which gives the one-half tie convention of ``auc``.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(truth).ravel()
    pos, neg = LabeledScores(s, t).classes()
    order = np.argsort(-s, kind="stable")
    s_sorted, t_sorted = s[order], t[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s_sorted.size - 1]
    tp = np.cumsum(t_sorted == 1)[last_of_group]
    fp = np.cumsum(t_sorted == 0)[last_of_group]
    points = [(0.0, 0.0)]
    points += [(float(f / neg.size), float(d / pos.size)) for f, d in zip(fp, tp)]
    return points


def roc_area(points) -> float:
    """Trapezoidal area under a list of ROC points."""
    pts = np.asarray(points, dtype=np.float64)
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0))


def label_noise_bound(n_err: int, n_labeled_neg: int) -> float:
    """Upper bound on the AUC change when ``n_err`` anomalies hide among the negatives."""
    return n_err / n_labeled_neg


def write_roc_tsv(path, points, header: str | None = None) -> None:
    with open(path, "w") as fh:
        if header:
            fh.write(header.rstrip("\n") + "\n")
        fh.write("pfa\tpd\n")
        for pfa, pd in points:
            fh.write(f"{pfa!r}\t{pd!r}\n")


def write_heatmap_tsv(path, log_lambdas, log_mus, grid, header: str | None = None) -> None:
    """One row per grid point; ``grid[a, b]`` is the AUC at ``(log_lambdas[a], log_mus[b])``."""
    with open(path, "w") as fh:
        if header:
            fh.write(header.rstrip("\n") + "\n")
        fh.write("log_lambda\tlog_mu\tauc\n")
        for a, ll in enumerate(log_lambdas):
            for b, lm in enumerate(log_mus):
                fh.write(f"{float(ll)!r}\t{float(lm)!r}\t{float(grid[a, b])!r}\n")
