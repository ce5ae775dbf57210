"""Synthetic grouped survey data with known latent structure.

Students are nested in schools nested in countries. Each student gets a
family SES index, a block of covariates patterned on the student/school/COVID
variable groups, a latent achievement margin built from fixed effects,
school and country random intercepts and optional covariate effects, and
three subject scores whose joint pass/fail against the level-2 cutoffs
reproduces a logistic draw on that margin.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from os import PathLike

import numpy as np

from .dataset import SCORE_COLUMNS, SES_COLUMN, FeatureSpec, FeatureTable

DEFAULT_CUTOFFS = {"pv_math": 420.07, "pv_read": 407.47, "pv_scie": 409.54}

# name, kind, (low, high), level, generator kind, parameters, nominal centre
_CATALOGUE = [
    ("StudBKGD_Gender", "binary", (0, 1), "student", "bernoulli", {"p": 0.5}, 0.5),
    ("StudBKGD_RepePrim", "binary", (0, 1), "student", "bernoulli_ses", {"p": 0.18, "slope": -0.4}, 0.18),
    ("StudBKGD_DD", "ordinal", (0, 10), "student", "ordinal_ses", {"mean": 6.5, "sd": 2.0, "slope": 0.8}, 6.5),
    ("StudBKGD_Books", "ordinal", (0, 5), "student", "ordinal_ses", {"mean": 1.2, "sd": 1.0, "slope": 0.4}, 1.2),
    ("StudBKGD_Homework", "ordinal", (0, 5), "student", "ordinal_ses", {"mean": 3.0, "sd": 1.3, "slope": 0.2}, 3.0),
    ("StudBKGD_SatisLife", "ordinal", (0, 10), "student", "ordinal_ses", {"mean": 7.0, "sd": 2.2, "slope": 0.0}, 7.0),
    ("StudBKGD_WorkPaid", "ordinal", (0, 10), "student", "ordinal_ses", {"mean": 1.4, "sd": 2.0, "slope": -0.3}, 1.4),
    ("StudBKGD_MotherEdu", "ordinal", (1, 6), "student", "ordinal_ses", {"mean": 3.5, "sd": 1.3, "slope": 0.7}, 3.5),
    ("StudBKGD_Curiosity", "continuous", (-5, 5), "student", "normal", {"mean": 0.0, "sd": 1.0}, 0.0),
    ("StudBKGD_Perseverance", "continuous", (-5, 5), "student", "normal", {"mean": 0.0, "sd": 1.0}, 0.0),
    ("StudBKGD_Empathy", "continuous", (-5, 5), "student", "normal", {"mean": 0.0, "sd": 1.0}, 0.0),
    ("SchBKGD_Private", "binary", (0, 1), "school", "bernoulli_ses", {"p": 0.12, "slope": 0.8}, 0.12),
    ("SchBKGD_Urban", "binary", (0, 1), "school", "bernoulli_ses", {"p": 0.6, "slope": 0.6}, 0.6),
    ("SchBKGD_STR", "continuous", (1, 80), "school", "normal", {"mean": 20.0, "sd": 5.0}, 20.0),
    ("CovidBKGD_Closeddays", "continuous", (0, 600), "school", "normal", {"mean": 230.0, "sd": 60.0}, 230.0),
    ("CovidBKGD_PropStudRemoteL", "ordinal", (1, 11), "school", "ordinal_ses", {"mean": 8.0, "sd": 2.0, "slope": 0.5}, 8.0),
    ("CovidBKGD_BarrierRemoteLAll", "continuous", (-5, 5), "school", "normal", {"mean": 0.3, "sd": 1.0}, 0.3),
]

FEATURE_NAMES = [c[0] for c in _CATALOGUE]


@dataclass
class SynthConfig:
    n_countries: int = 3
    schools_per_country: int = 10
    students_per_school: int = 20
    beta0: float = 0.0
    beta_ses: float = 0.0
    beta_school_ses: float = 0.0
    sigma2_school: float = 0.0
    sigma2_country: float = 0.0
    school_ses_sd: float = 0.6
    feature_effects: dict[str, float] = field(default_factory=dict)
    nonlinear: bool = False
    nonlinear_feature: str = "StudBKGD_Curiosity"
    nonlinear_strength: float = 0.8
    interaction: bool = False
    interaction_features: tuple[str, str] = ("StudBKGD_Gender", "StudBKGD_RepePrim")
    interaction_strength: float = 1.5
    missing_rate: float = 0.0
    score_scale: float = 40.0
    cutoffs: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_CUTOFFS))
    features: list[str] | None = None

    def __post_init__(self):
        for name in ("n_countries", "schools_per_country", "students_per_school"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.sigma2_school < 0 or self.sigma2_country < 0:
            raise ValueError("variance components must be non-negative")
        if not 0 <= self.missing_rate < 1:
            raise ValueError("missing_rate must lie in [0, 1)")
        names = self.feature_names()
        unknown = [n for n in names if n not in FEATURE_NAMES]
        unknown += [n for n in self.feature_effects if n not in names]
        if self.nonlinear and self.nonlinear_feature not in names:
            unknown.append(self.nonlinear_feature)
        if self.interaction:
            unknown += [n for n in self.interaction_features if n not in names]
        if unknown:
            raise ValueError(f"unknown synthetic features: {unknown}")
        self.interaction_features = tuple(self.interaction_features)

    def feature_names(self) -> list[str]:
        return list(FEATURE_NAMES) if self.features is None else list(self.features)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown synth config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | PathLike) -> "SynthConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["interaction_features"] = list(self.interaction_features)
        return d


@dataclass
class LatentTruth:
    """Everything the generator drew, for recovery and self-consistency checks."""

    school_ids: np.ndarray
    country_ids: np.ndarray
    school_intercepts: np.ndarray
    country_intercepts: np.ndarray
    school_mean_ses: np.ndarray
    ses: np.ndarray
    margin: np.ndarray
    fixed_part: np.ndarray
    feature_part: np.ndarray
    nonlinear_term: np.ndarray
    interaction_term: np.ndarray
    outcome: np.ndarray
    centres: dict[str, float]
    config: SynthConfig

    def to_json(self, path: str | PathLike) -> None:
        payload = {
            "config": self.config.to_dict(),
            "school_ids": list(self.school_ids),
            "country_ids": list(self.country_ids),
            "school_intercepts": self.school_intercepts.tolist(),
            "country_intercepts": self.country_intercepts.tolist(),
            "school_mean_ses": self.school_mean_ses.tolist(),
            "centres": self.centres,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")


def feature_specs(names: list[str] | None = None) -> list[FeatureSpec]:
    wanted = FEATURE_NAMES if names is None else names
    by_name = {c[0]: c for c in _CATALOGUE}
    return [FeatureSpec(name=n, kind=by_name[n][1], low=float(by_name[n][2][0]), high=float(by_name[n][2][1]))
            for n in wanted]


def _draw(rng, kind, params, ses, lo, hi):
    n = len(ses)
    if kind == "bernoulli":
        return (rng.random(n) < params["p"]).astype(float)
    if kind == "bernoulli_ses":
        base = np.log(params["p"] / (1 - params["p"]))
        p = 1.0 / (1.0 + np.exp(-(base + params["slope"] * ses)))
        return (rng.random(n) < p).astype(float)
    if kind == "ordinal_ses":
        raw = params["mean"] + params["slope"] * params["sd"] * ses + params["sd"] * rng.standard_normal(n)
        return np.clip(np.round(raw), lo, hi)
    if kind == "normal":
        return np.clip(params["mean"] + params["sd"] * rng.standard_normal(n), lo, hi)
    raise ValueError(kind)


def synth_generate(config: SynthConfig, seed: int = 0) -> tuple[FeatureTable, LatentTruth]:
    """Generate a table and its latent record; bitwise reproducible for a seed."""
    rng = np.random.default_rng(seed)
    c = config
    n_schools = c.n_countries * c.schools_per_country
    n = n_schools * c.students_per_school

    country_of_school = np.repeat(np.arange(c.n_countries), c.schools_per_country)
    school_of_row = np.repeat(np.arange(n_schools), c.students_per_school)
    country_of_row = country_of_school[school_of_row]

    v = rng.normal(0.0, np.sqrt(c.sigma2_country), c.n_countries) if c.sigma2_country > 0 else np.zeros(c.n_countries)
    u = rng.normal(0.0, np.sqrt(c.sigma2_school), n_schools) if c.sigma2_school > 0 else np.zeros(n_schools)
    school_ses = rng.normal(0.0, c.school_ses_sd, n_schools)
    ses = school_ses[school_of_row] + rng.standard_normal(n) * np.sqrt(max(1.0 - c.school_ses_sd ** 2, 0.1))

    # per-school SES observed in the sample, matching how the fit forms it
    counts = np.bincount(school_of_row, minlength=n_schools)
    sample_mean_ses = np.bincount(school_of_row, weights=ses, minlength=n_schools) / counts

    names = c.feature_names()
    by_name = {row[0]: row for row in _CATALOGUE}
    columns = {}
    for name in names:
        _, _, (lo, hi), level, kind, params, _ = by_name[name]
        if level == "school":
            columns[name] = _draw(rng, kind, params, sample_mean_ses, lo, hi)[school_of_row]
        else:
            columns[name] = _draw(rng, kind, params, ses, lo, hi)
    centres = {name: float(by_name[name][6]) for name in names}

    fixed = c.beta0 + c.beta_ses * ses + c.beta_school_ses * sample_mean_ses[school_of_row]
    feature_part = np.zeros(n)
    for name, coef in c.feature_effects.items():
        feature_part += coef * (columns[name] - centres[name])
    nonlinear_term = np.zeros(n)
    if c.nonlinear:
        x = columns[c.nonlinear_feature] - centres[c.nonlinear_feature]
        nonlinear_term = -c.nonlinear_strength * (x ** 2 - 1.0)
    interaction_term = np.zeros(n)
    if c.interaction:
        a, b = c.interaction_features
        interaction_term = c.interaction_strength * columns[a] * columns[b]
    margin = fixed + feature_part + nonlinear_term + interaction_term + u[school_of_row] + v[country_of_row]

    # logistic noise: P(margin + eps >= 0) = sigmoid(margin)
    z = margin + rng.logistic(0.0, 1.0, n)
    outcome = (z >= 0).astype(int)
    cut = np.array([c.cutoffs[s] for s in SCORE_COLUMNS])
    lift = np.abs(rng.normal(0.0, 0.4, (n, 3)))
    weakest = rng.integers(0, 3, n)
    lift[np.arange(n), weakest] = 0.0
    scores = cut[None, :] + c.score_scale * (z[:, None] + lift)

    values = np.column_stack([columns[name] for name in names]) if names else np.zeros((n, 0))
    if c.missing_rate > 0:
        holes = rng.random(values.shape) < c.missing_rate
        values = np.where(holes, np.nan, values)

    school_labels = np.array([f"S{j:04d}" for j in range(n_schools)], dtype=object)
    country_labels = np.array([f"C{k:02d}" for k in range(c.n_countries)], dtype=object)
    table = FeatureTable(
        schema=tuple(feature_specs(names)),
        values=values,
        student_ids=np.array([f"P{i:06d}" for i in range(n)], dtype=object),
        school_ids=school_labels[school_of_row],
        country_ids=country_labels[country_of_row],
        weights=np.ones(n),
        extras={SES_COLUMN: ses, **{s: scores[:, j] for j, s in enumerate(SCORE_COLUMNS)}},
    )
    truth = LatentTruth(
        school_ids=school_labels,
        country_ids=country_labels,
        school_intercepts=u,
        country_intercepts=v,
        school_mean_ses=sample_mean_ses,
        ses=ses,
        margin=margin,
        fixed_part=fixed,
        feature_part=feature_part,
        nonlinear_term=nonlinear_term,
        interaction_term=interaction_term,
        outcome=outcome,
        centres=centres,
        config=c,
    )
    return table, truth
