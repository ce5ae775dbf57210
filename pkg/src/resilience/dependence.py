"""Partial dependence, relative probability and odds-ratio curves.

For a grid value v the partial function f_S(v) is the mean predicted
probability after pinning the swept feature to v in every row. The
relative probability divides f_S by the mean prediction on the untouched
rows; the odds ratio compares the odds of f_S with reference odds (the
baseline mean prediction unless a grid point is named).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from os import PathLike
from typing import Sequence

import numpy as np

from .dataset import FeatureTable

AUTO_GRID_POINTS = 25


@dataclass(frozen=True)
class PdpCurve:
    feature: str
    grid: np.ndarray
    f_s: np.ndarray
    baseline: float

    def __post_init__(self):
        if len(self.grid) == 0:
            raise ValueError("empty grid")
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")

    @property
    def rp(self) -> np.ndarray:
        return self.f_s / self.baseline


@dataclass(frozen=True)
class OddsRatios:
    values: np.ndarray
    reference_probability: float
    unbounded: np.ndarray  # True where the probability sits at 0 or 1


def _odds(p):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.asarray(p, dtype=float) / (1.0 - np.asarray(p, dtype=float))


def odds_ratio_transform(curve: PdpCurve, reference: float | str = "baseline") -> OddsRatios:
    """OR(v) = odds(f_S(v)) / odds(p_ref); ``reference`` is "baseline" or a grid value."""
    if isinstance(reference, str):
        if reference != "baseline":
            raise ValueError("reference must be 'baseline' or a grid value")
        p_ref = curve.baseline
    else:
        hit = np.flatnonzero(curve.grid == reference)
        if not len(hit):
            raise ValueError(f"reference {reference!r} is not a grid value")
        p_ref = float(curve.f_s[hit[0]])
    if not 0 < p_ref < 1:
        raise ValueError("reference probability must lie strictly between 0 and 1")
    p = curve.f_s
    unbounded = (p <= 0) | (p >= 1)
    ratio = _odds(np.clip(p, 0.0, 1.0)) / _odds(p_ref)
    if isinstance(reference, str):
        return OddsRatios(ratio, p_ref, unbounded)
    # the reference point is 1 by definition, not up to rounding
    ratio = np.where(curve.grid == reference, 1.0, ratio)
    return OddsRatios(ratio, p_ref, unbounded)


def automatic_grid(values, points: int = AUTO_GRID_POINTS) -> np.ndarray:
    """Observed unique values when there are at most ``points``, else quantiles."""
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    if not len(v):
        raise ValueError("no observed values to build a grid from")
    uniq = np.unique(v)
    if len(uniq) <= points:
        return uniq
    return np.unique(np.quantile(v, np.linspace(0.0, 1.0, points)))


def empirical_grid(values) -> tuple[np.ndarray, np.ndarray]:
    """Observed unique values and their relative frequencies."""
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    uniq, counts = np.unique(v, return_counts=True)
    return uniq, counts / counts.sum()


def _resolve(data, feature) -> tuple[np.ndarray, int, str]:
    if isinstance(data, FeatureTable):
        X, names = data.values, data.feature_names
    else:
        X, names = data, None
    X = np.asarray(X, dtype=float)
    if isinstance(feature, str):
        if names is None or feature not in names:
            raise KeyError(f"unknown feature {feature!r}")
        return X, list(names).index(feature), feature
    j = int(feature)
    if not 0 <= j < X.shape[1]:
        raise KeyError(f"feature index {j} out of range")
    return X, j, names[j] if names is not None else f"x{j}"


def partial_dependence(model, data, feature, grid: Sequence[float] | None = None) -> PdpCurve:
    """Sweep one feature; ``model`` needs a ``predict_proba(X)`` method."""
    X, j, name = _resolve(data, feature)
    grid = automatic_grid(X[:, j]) if grid is None else np.asarray(grid, dtype=float)
    if len(grid) == 0:
        raise ValueError("empty grid")
    baseline = float(np.mean(model.predict_proba(X)))
    work = X.copy()
    f_s = np.empty(len(grid))
    for g, v in enumerate(grid):
        work[:, j] = v
        f_s[g] = float(np.mean(model.predict_proba(work)))
    return PdpCurve(name, grid, f_s, baseline)


CURVE_HEADER = ("feature", "value", "f_s", "rp", "odds_ratio", "or_unbounded", "baseline", "reference")


def write_curve_csv(curve: PdpCurve, path: str | PathLike, reference: float | str = "baseline") -> None:
    ors = odds_ratio_transform(curve, reference)
    ref = "baseline" if isinstance(reference, str) else repr(float(reference))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for v, f, rp, o, unb in zip(curve.grid, curve.f_s, curve.rp, ors.values, ors.unbounded):
            w.writerow([curve.feature, repr(float(v)), repr(float(f)), repr(float(rp)),
                        "inf" if math.isinf(o) else repr(float(o)), int(unb), repr(curve.baseline), ref])
