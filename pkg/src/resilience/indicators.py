"""SAR1-SAR4 academic-resilience label sets.

SAR1: bottom-two SES quintile students at level 2 or above in all three subjects.
SAR3: SAR1 restricted to schools whose score/SES correlation is at or above the median.
SAR2: bottom-two quintile students whose multilevel-predicted probability of the
      composite level-2 outcome is in the top two quintiles of the full sample.
SAR4: SAR2 excluding schools whose random intercept is in the top quintile.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from os import PathLike
from typing import Mapping

import numpy as np

from .dataset import SCORE_COLUMNS, SES_COLUMN, FeatureTable, assign_quintiles
from .multilevel import MultilevelFit, fit_3level_logit, intercept_quintiles, predict_many

INDICATORS = ("SAR1", "SAR2", "SAR3", "SAR4")

# Published whole-sample and sub-system rates, for checks against a real extract
REFERENCE_RATES = {
    "whole": {"SAR1": 0.212, "SAR2": 0.117, "SAR3": 0.112, "SAR4": 0.052, "N": 17058},
    "public": {"SAR1": 0.194, "SAR2": 0.095, "SAR3": 0.103, "SAR4": 0.037, "N": 15599},
    "private": {"SAR1": 0.400, "SAR2": 0.348, "SAR3": 0.211, "SAR4": 0.213, "N": 1459},
    "rural": {"SAR1": 0.135, "SAR2": 0.044, "SAR3": 0.072, "SAR4": 0.023, "N": 6505},
    "urban": {"SAR1": 0.259, "SAR2": 0.162, "SAR3": 0.137, "SAR4": 0.070, "N": 10553},
}

SUBSYSTEMS = (
    ("whole", None, None),
    ("public", "SchBKGD_Private", 0.0),
    ("private", "SchBKGD_Private", 1.0),
    ("rural", "SchBKGD_Urban", 0.0),
    ("urban", "SchBKGD_Urban", 1.0),
)


def default_cutoffs() -> dict[str, float]:
    """Shipped level-2 lower bounds per subject (score points)."""
    text = resources.files("resilience").joinpath("data/level2_cutoffs.json").read_text(encoding="utf-8")
    return {k: float(v) for k, v in json.loads(text)["cutoffs"].items()}


@dataclass(frozen=True)
class ScoreTriple:
    math: float
    reading: float
    science: float
    cutoff_math: float
    cutoff_reading: float
    cutoff_science: float

    def __post_init__(self):
        if min(self.cutoff_math, self.cutoff_reading, self.cutoff_science) <= 0:
            raise ValueError("cutoffs must be strictly positive")


def passes_level2(s: ScoreTriple) -> int:
    """1 when every subject score reaches its cutoff (boundary inclusive)."""
    for v in (s.math, s.reading, s.science):
        if v is None or not math.isfinite(v):
            raise ValueError("missing subject score")
    return int(s.math >= s.cutoff_math and s.reading >= s.cutoff_reading and s.science >= s.cutoff_science)


def composite_level2(table: FeatureTable, cutoffs: Mapping[str, float] | None = None,
                     subjects=SCORE_COLUMNS) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized level-2 composite; returns ``(passed, excluded)``.

    Rows missing any subject score are excluded (``passed`` is 0 there).
    """
    cut = default_cutoffs() if cutoffs is None else dict(cutoffs)
    if any(cut[s] <= 0 for s in subjects):
        raise ValueError("cutoffs must be strictly positive")
    scores = np.column_stack([table.column(s) for s in subjects])
    excluded = np.any(np.isnan(scores), axis=1)
    ok = np.all(scores >= np.array([cut[s] for s in subjects])[None, :], axis=1)
    return (ok & ~excluded).astype(int), excluded


@dataclass(frozen=True)
class SchoolInequality:
    school_ids: np.ndarray
    school_country: np.ndarray
    rho: np.ndarray
    degenerate: np.ndarray
    median: float
    country_median: dict = field(default_factory=dict)

    def rho_of(self) -> dict:
        return dict(zip(self.school_ids, self.rho))

    def threshold_for(self, country, per_country: bool) -> float:
        return self.country_median[country] if per_country else self.median


def _pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        return None
    return max(-1.0, min(1.0, float(dx @ dy) / math.sqrt(sxx * syy)))


def average_score(table: FeatureTable, subjects=SCORE_COLUMNS) -> np.ndarray:
    return np.mean(np.column_stack([table.column(s) for s in subjects]), axis=1)


def school_ses_correlation(table: FeatureTable, score: np.ndarray | None = None,
                           ses: np.ndarray | None = None) -> SchoolInequality:
    """Within-school Pearson correlation of student score with family SES.

    Schools with fewer than two complete students, or zero variance in
    either variable, are flagged degenerate and get rho = 0. The median is
    taken over non-degenerate schools, pooled and per country.
    """
    score = average_score(table) if score is None else np.asarray(score, dtype=float)
    ses = table.column(SES_COLUMN) if ses is None else np.asarray(ses, dtype=float)
    schools, codes = table.schools()
    country = np.empty(len(schools), dtype=object)
    country[codes] = table.country_ids
    ok = ~(np.isnan(score) | np.isnan(ses))
    rho = np.zeros(len(schools))
    degenerate = np.ones(len(schools), dtype=bool)
    order = np.argsort(codes, kind="stable")
    bounds = np.searchsorted(codes[order], np.arange(len(schools) + 1))
    for j in range(len(schools)):
        rows = order[bounds[j]:bounds[j + 1]]
        rows = rows[ok[rows]]
        if len(rows) < 2:
            continue
        r = _pearson(score[rows], ses[rows])
        if r is not None:
            rho[j], degenerate[j] = r, False
    if degenerate.all():
        raise ValueError("no school has a defined score/SES correlation")
    pooled = float(np.median(rho[~degenerate]))
    per_country = {}
    for c in dict.fromkeys(country):
        sel = (country == c) & ~degenerate
        per_country[c] = float(np.median(rho[sel])) if sel.any() else pooled
    return SchoolInequality(schools, country, rho, degenerate, pooled, per_country)


@dataclass
class SarLabelSet:
    """Labels over the full table; SAR columns are meaningful only where ``working`` is set."""

    working: np.ndarray
    ses_quintile: np.ndarray
    composite: np.ndarray
    excluded: np.ndarray
    sar: dict[str, np.ndarray] = field(default_factory=dict)
    rho: np.ndarray | None = None
    rho_threshold: np.ndarray | None = None
    y_hat: np.ndarray | None = None
    y_hat_quintile: np.ndarray | None = None
    intercept_quintile: np.ndarray | None = None
    fit: MultilevelFit | None = None

    def labels(self, name: str) -> np.ndarray:
        """Labels for working-sample rows only, in table order."""
        return self.sar[name][self.working]

    def rates(self, mask: np.ndarray | None = None) -> dict[str, float]:
        sel = self.working if mask is None else self.working & mask
        n = int(sel.sum())
        out = {name: (float(self.sar[name][sel].mean()) if n else math.nan) for name in INDICATORS if name in self.sar}
        out["N"] = n
        return out


def build_sar1(table: FeatureTable, cutoffs: Mapping[str, float] | None = None,
               ses_quintiles: np.ndarray | None = None, weighted: bool = False) -> SarLabelSet:
    """Working sample (SES quintiles 1-2) and SAR1 within it.

    Quintiles are assigned over every row with a finite SES, unit-weighted
    unless ``weighted`` is set. Rows without SES or without all three scores
    are left out of the working sample.
    """
    passed, excluded = composite_level2(table, cutoffs)
    ses = table.column(SES_COLUMN)
    has_ses = ~np.isnan(ses)
    if ses_quintiles is None:
        ses_quintiles = np.zeros(table.n_rows, dtype=int)
        w = table.weights[has_ses] if weighted else None
        ses_quintiles[has_ses] = assign_quintiles(ses[has_ses], w)
    working = np.isin(ses_quintiles, (1, 2)) & ~excluded & has_ses
    if not working.any():
        raise ValueError("empty working sample")
    sar1 = np.where(working, passed, 0)
    return SarLabelSet(working=working, ses_quintile=np.asarray(ses_quintiles), composite=passed,
                       excluded=excluded | ~has_ses, sar={"SAR1": sar1})


def build_sar3(labels: SarLabelSet, table: FeatureTable, inequality: SchoolInequality,
               per_country: bool = False) -> np.ndarray:
    """SAR3 = SAR1 and the student's school rho at or above the median rho."""
    pos = {s: j for j, s in enumerate(inequality.school_ids)}
    j = np.array([pos[s] for s in table.school_ids])
    rho = inequality.rho[j]
    thr = np.array([inequality.threshold_for(c, per_country) for c in table.country_ids]) if per_country \
        else np.full(table.n_rows, inequality.median)
    sar3 = labels.sar["SAR1"] * (rho >= thr)
    labels.sar["SAR3"] = sar3.astype(int)
    labels.rho, labels.rho_threshold = rho, thr
    return labels.sar["SAR3"]


def fit_sar_model(table: FeatureTable, labels: SarLabelSet, **kwargs) -> MultilevelFit:
    """Fit the three-level logit for the composite outcome on the full sample."""
    ses = table.column(SES_COLUMN)
    rows = ~labels.excluded
    return fit_3level_logit(labels.composite[rows], ses[rows], table.school_ids[rows],
                            table.country_ids[rows], **kwargs)


def build_sar2(fit: MultilevelFit, table: FeatureTable, labels: SarLabelSet) -> np.ndarray:
    """SAR2 from full-sample probability quintiles, labelled on the working sample."""
    if fit is None:
        raise ValueError("multilevel model not fitted")
    ses = table.column(SES_COLUMN)
    rows = ~labels.excluded
    y_hat = np.full(table.n_rows, np.nan)
    y_hat[rows] = predict_many(fit, ses[rows], table.school_ids[rows], table.country_ids[rows])
    q = np.zeros(table.n_rows, dtype=int)
    q[rows] = assign_quintiles(y_hat[rows])
    sar2 = (labels.working & (q >= 4)).astype(int)
    labels.sar["SAR2"] = sar2
    labels.y_hat, labels.y_hat_quintile, labels.fit = y_hat, q, fit
    return sar2


def build_sar4(labels: SarLabelSet, table: FeatureTable, fit: MultilevelFit) -> np.ndarray:
    """SAR4 = SAR2 and the school's intercept not in the top quintile of schools."""
    iq = intercept_quintiles(fit)
    pos = {s: j for j, s in enumerate(fit.school_ids)}
    school_q = np.array([iq[pos[s]] if s in pos else 0 for s in np.asarray(table.school_ids).astype(str)])
    sar4 = labels.sar["SAR2"] * (school_q != 5)
    labels.sar["SAR4"] = sar4.astype(int)
    labels.intercept_quintile = school_q
    return labels.sar["SAR4"]


def build_all(table: FeatureTable, cutoffs: Mapping[str, float] | None = None, *, weighted: bool = False,
              per_country_rho: bool = False, fit: MultilevelFit | None = None, **fit_kwargs) -> SarLabelSet:
    labels = build_sar1(table, cutoffs, weighted=weighted)
    build_sar3(labels, table, school_ses_correlation(table), per_country=per_country_rho)
    if fit is None:
        fit = fit_sar_model(table, labels, **fit_kwargs)
    build_sar2(fit, table, labels)
    build_sar4(labels, table, fit)
    return labels


def rates_table(table: FeatureTable, labels: SarLabelSet) -> dict[str, dict[str, float]]:
    """Rates per sub-system (whole, public, private, rural, urban) where the columns exist."""
    out = {}
    names = set(table.feature_names)
    for name, col, val in SUBSYSTEMS:
        if col is None:
            out[name] = labels.rates()
        elif col in names:
            out[name] = labels.rates(table.column(col) == val)
    return out


def write_rates_csv(rates: dict[str, dict[str, float]], path: str | PathLike) -> None:
    cols = list(rates)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["indicator"] + cols)
        for ind in INDICATORS + ("N",):
            row = [ind]
            for c in cols:
                v = rates[c].get(ind, math.nan)
                row.append(str(int(v)) if ind == "N" else ("" if math.isnan(v) else f"{v:.3f}"))
            w.writerow(row)


def write_indicator_report(table: FeatureTable, labels: SarLabelSet, path: str | PathLike) -> None:
    """One row per working-sample student with the quantities behind each label."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "school_id", "country_id", "ses_quintile", "y_hat", "y_hat_quintile",
                    "rho", "rho_threshold", "intercept_quintile"] + list(INDICATORS))
        for i in np.flatnonzero(labels.working):
            def opt(arr, fmt="{:.6f}"):
                return "" if arr is None or (isinstance(arr[i], float) and math.isnan(arr[i])) else fmt.format(arr[i])
            w.writerow([table.student_ids[i], table.school_ids[i], table.country_ids[i], labels.ses_quintile[i],
                        opt(labels.y_hat), opt(labels.y_hat_quintile, "{}"), opt(labels.rho),
                        opt(labels.rho_threshold), opt(labels.intercept_quintile, "{}")]
                       + [int(labels.sar[n][i]) if n in labels.sar else "" for n in INDICATORS])


def compare_to_reference(rates: dict[str, dict[str, float]], tol: float = 0.01) -> list[dict]:
    """Residuals against the published rates; every row is reported, pass or not."""
    rows = []
    for col, ref in REFERENCE_RATES.items():
        if col not in rates:
            continue
        for ind in INDICATORS:
            got = rates[col].get(ind, math.nan)
            rows.append({"subsystem": col, "indicator": ind, "reference": ref[ind], "observed": got,
                         "residual": got - ref[ind], "within_tolerance": abs(got - ref[ind]) <= tol})
    return rows
