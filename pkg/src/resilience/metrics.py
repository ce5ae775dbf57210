"""Ranking metrics for binary classifiers and Spearman rank correlation."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class MetricReport:
    auroc: float
    auprc: float
    n: int
    positives: int


def _check_binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0/1")
    return y.astype(int)


def auroc(labels, scores) -> float:
    """Probability that a random positive outscores a random negative, ties count 1/2.

    Computed from the Mann-Whitney rank sum with mid-ranks.
    """
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=float)
    if s.shape != y.shape:
        raise ValueError("labels and scores differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both classes")
    ranks = stats.rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(labels, scores) -> float:
    """Step-wise area under the precision-recall curve.

    Scores are swept from high to low one tie group at a time and the area is
    ``sum((R_k - R_{k-1}) * P_k)`` with no interpolation between points.
    """
    y = _check_binary(labels)
    s = np.asarray(scores, dtype=float)
    if s.shape != y.shape:
        raise ValueError("labels and scores differ in length")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("auprc needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    seen = np.arange(1, len(y) + 1)
    # last index of each tie group
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    precision = tp[ends] / seen[ends]
    recall = tp[ends] / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def evaluate(labels, scores) -> MetricReport:
    y = _check_binary(labels)
    return MetricReport(auroc(y, scores), auprc(y, scores), len(y), int(y.sum()))


def spearman(a, b, exact: bool = False) -> tuple[float, float]:
    """Spearman rho as the Pearson correlation of mid-ranks, with a two-sided p-value.

    The p-value uses the t approximation with n - 2 degrees of freedom, or
    the full permutation distribution when ``exact`` is set (n <= 10).
    Returns ``(nan, nan)`` when either argument has zero rank variance.
    """
    x = np.asarray(a, dtype=float)
    z = np.asarray(b, dtype=float)
    if x.shape != z.shape or x.ndim != 1:
        raise ValueError("spearman needs two equal-length 1-d sequences")
    n = len(x)
    if n < 3:
        raise ValueError("spearman needs at least 3 pairs")
    rx, rz = stats.rankdata(x), stats.rankdata(z)
    rho = _pearson(rx, rz)
    if math.isnan(rho):
        return math.nan, math.nan
    if exact:
        if n > 10:
            raise ValueError("exact permutation p-value limited to n <= 10")
        hits = 0
        total = 0
        for perm in itertools.permutations(range(n)):
            r = _pearson(rx, rz[list(perm)])
            hits += abs(r) >= abs(rho) - 1e-12
            total += 1
        return rho, hits / total
    if abs(rho) >= 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return rho, float(2.0 * stats.t.sf(abs(t), n - 2))


def _pearson(x: np.ndarray, z: np.ndarray) -> float:
    dx, dz = x - x.mean(), z - z.mean()
    sxx, szz = float(dx @ dx), float(dz @ dz)
    if sxx == 0 or szz == 0:
        return math.nan
    r = float(dx @ dz) / math.sqrt(sxx * szz)
    return max(-1.0, min(1.0, r))
