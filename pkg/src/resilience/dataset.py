"""Grouped survey tables: ingestion, validation, quintiles, folds and group summaries."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from os import PathLike
from typing import IO, Iterable, Sequence

import numpy as np
from scipy import stats

KINDS = ("continuous", "ordinal", "binary", "categorical")
KEY_COLUMNS = ("student_id", "school_id", "country_id")
SCORE_COLUMNS = ("pv_math", "pv_read", "pv_scie")
SES_COLUMN = "escs"


class SchemaError(ValueError):
    """A cell, column or schema entry violates its declared feature spec."""


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    low: float | None = None
    high: float | None = None
    categories: tuple[str, ...] = ()
    missing_allowed: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical" and not self.categories:
            raise SchemaError(f"feature {self.name!r}: categorical kind needs categories")

    def parse(self, text: str) -> float:
        """Parse one non-missing cell; raises ValueError with a short reason."""
        if self.kind == "categorical":
            try:
                return float(self.categories.index(text))
            except ValueError:
                raise ValueError(f"{text!r} is not one of {list(self.categories)}") from None
        value = float(text)
        if not math.isfinite(value):
            raise ValueError(f"{text!r} is not finite")
        if self.kind == "binary" and value not in (0.0, 1.0):
            raise ValueError(f"{text!r} is not 0 or 1")
        if self.kind == "ordinal" and value != round(value):
            raise ValueError(f"{text!r} is not an integer code")
        if self.low is not None and value < self.low:
            raise ValueError(f"{text!r} below declared minimum {self.low}")
        if self.high is not None and value > self.high:
            raise ValueError(f"{text!r} above declared maximum {self.high}")
        return value

    def to_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind, "missing_allowed": self.missing_allowed}
        if self.kind == "categorical":
            out["categories"] = list(self.categories)
        elif self.low is not None or self.high is not None:
            out["range"] = [self.low, self.high]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        kind = d["kind"]
        if kind == "ordinal-integer":
            kind = "ordinal"
        low, high = (d.get("range") or (None, None))
        return cls(
            name=d["name"],
            kind=kind,
            low=None if low is None else float(low),
            high=None if high is None else float(high),
            categories=tuple(d.get("categories", ())),
            missing_allowed=bool(d.get("missing_allowed", True)),
        )


def check_schema(schema: Sequence[FeatureSpec]) -> None:
    seen = set()
    for spec in schema:
        if spec.name in seen:
            raise SchemaError(f"duplicate feature name {spec.name!r}")
        seen.add(spec.name)


def load_schema(path: str | PathLike) -> list[FeatureSpec]:
    with open(path, encoding="utf-8") as fh:
        schema = [FeatureSpec.from_dict(d) for d in json.load(fh)]
    check_schema(schema)
    return schema


def dump_schema(schema: Sequence[FeatureSpec], path: str | PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([s.to_dict() for s in schema], fh, indent=2)
        fh.write("\n")


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """Immutable table of typed covariates keyed by student, school and country.

    ``values`` is ``(n_rows, n_features)`` float with NaN marking missing cells;
    categorical features hold their category index. ``extras`` carries
    non-feature numeric columns (SES index, subject scores).
    """

    schema: tuple[FeatureSpec, ...]
    values: np.ndarray
    student_ids: np.ndarray
    school_ids: np.ndarray
    country_ids: np.ndarray
    weights: np.ndarray
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        check_schema(self.schema)
        n = len(self.student_ids)
        if self.values.shape != (n, len(self.schema)):
            raise SchemaError(
                f"values shape {self.values.shape} does not match {n} rows x {len(self.schema)} features"
            )
        for name, arr in (("school_ids", self.school_ids), ("country_ids", self.country_ids),
                          ("weights", self.weights)):
            if len(arr) != n:
                raise SchemaError(f"{name} has {len(arr)} entries for {n} rows")
        for name, arr in self.extras.items():
            if len(arr) != n:
                raise SchemaError(f"extra column {name!r} has {len(arr)} entries for {n} rows")
        if np.any(~np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise SchemaError("weights must be finite and non-negative")
        if n and not np.any(self.weights > 0):
            raise SchemaError("at least one weight must be positive")
        owner: dict[str, str] = {}
        for school, country in zip(self.school_ids, self.country_ids):
            prev = owner.setdefault(school, country)
            if prev != country:
                raise SchemaError(f"school {school!r} mapped to two countries ({prev!r}, {country!r})")
        for arr in (self.values, self.student_ids, self.school_ids, self.country_ids, self.weights,
                    *self.extras.values()):
            arr.setflags(write=False)

    @property
    def n_rows(self) -> int:
        return len(self.student_ids)

    @property
    def n_features(self) -> int:
        return len(self.schema)

    @property
    def feature_names(self) -> list[str]:
        return [s.name for s in self.schema]

    @property
    def missing_mask(self) -> np.ndarray:
        return np.isnan(self.values)

    def index_of(self, name: str) -> int:
        for i, spec in enumerate(self.schema):
            if spec.name == name:
                return i
        raise KeyError(f"unknown feature {name!r}")

    def column(self, name: str) -> np.ndarray:
        if name in self.extras:
            return self.extras[name]
        return self.values[:, self.index_of(name)]

    def subset(self, rows: np.ndarray) -> "FeatureTable":
        rows = np.asarray(rows)
        return FeatureTable(
            schema=self.schema,
            values=self.values[rows].copy(),
            student_ids=self.student_ids[rows].copy(),
            school_ids=self.school_ids[rows].copy(),
            country_ids=self.country_ids[rows].copy(),
            weights=self.weights[rows].copy(),
            extras={k: v[rows].copy() for k, v in self.extras.items()},
        )

    def schools(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique school ids in first-appearance order and per-row school index."""
        return _factorize(self.school_ids)


def _factorize(ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lookup: dict = {}
    codes = np.empty(len(ids), dtype=np.int64)
    for i, key in enumerate(ids):
        codes[i] = lookup.setdefault(key, len(lookup))
    uniques = np.empty(len(lookup), dtype=object)
    for key, code in lookup.items():
        uniques[code] = key
    return uniques, codes


def load_table(
    source: str | PathLike | IO[str],
    schema: Sequence[FeatureSpec],
    key_columns: Sequence[str] = KEY_COLUMNS,
    weight_column: str | None = None,
    extra_columns: Sequence[str] = (),
    missing_sentinel: str = "",
    delimiter: str = ",",
) -> FeatureTable:
    """Read a CSV extract into a validated :class:`FeatureTable`.

    Cells that are empty or equal to ``missing_sentinel`` become missing. Row
    order is preserved. Errors cite the 1-based data row and the column name.
    """
    check_schema(schema)
    if isinstance(source, (str, PathLike)):
        with open(source, newline="", encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = source.read()
    reader = csv.reader(io.StringIO(text), delimiter=delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError("CSV has no header row") from None
    position = {name: i for i, name in enumerate(header)}
    needed = list(key_columns) + [s.name for s in schema] + list(extra_columns)
    if weight_column:
        needed.append(weight_column)
    absent = [c for c in needed if c not in position]
    if absent:
        raise SchemaError(f"missing columns: {absent}")

    def is_missing(cell: str) -> bool:
        return cell.strip() == "" or cell == missing_sentinel

    rows, keys, weights, extras = [], [], [], []
    for r, record in enumerate(reader, start=1):
        if not record:
            continue
        if len(record) != len(header):
            raise SchemaError(f"row {r}: expected {len(header)} cells, found {len(record)}")
        key = []
        for col in key_columns:
            cell = record[position[col]].strip()
            if is_missing(cell):
                raise SchemaError(f"row {r}, column {col!r}: key is missing")
            key.append(cell)
        keys.append(key)
        vals = []
        for spec in schema:
            cell = record[position[spec.name]]
            if is_missing(cell):
                if not spec.missing_allowed:
                    raise SchemaError(f"row {r}, column {spec.name!r}: missing value not allowed")
                vals.append(np.nan)
                continue
            try:
                vals.append(spec.parse(cell.strip()))
            except ValueError as exc:
                raise SchemaError(f"row {r}, column {spec.name!r}: {exc}") from None
        rows.append(vals)
        ext = []
        for col in extra_columns:
            cell = record[position[col]]
            if is_missing(cell):
                ext.append(np.nan)
                continue
            try:
                ext.append(float(cell))
            except ValueError:
                raise SchemaError(f"row {r}, column {col!r}: {cell!r} is not numeric") from None
        extras.append(ext)
        if weight_column:
            cell = record[position[weight_column]]
            try:
                w = 1.0 if is_missing(cell) else float(cell)
            except ValueError:
                raise SchemaError(f"row {r}, column {weight_column!r}: {cell!r} is not numeric") from None
            if not math.isfinite(w) or w < 0:
                raise SchemaError(f"row {r}, column {weight_column!r}: weight must be >= 0")
            weights.append(w)
        else:
            weights.append(1.0)

    n = len(rows)
    values = np.array(rows, dtype=float).reshape(n, len(schema))
    key_arr = np.array(keys, dtype=object).reshape(n, len(key_columns))
    ext_arr = np.array(extras, dtype=float).reshape(n, len(extra_columns))
    return FeatureTable(
        schema=tuple(schema),
        values=values,
        student_ids=key_arr[:, 0].copy(),
        school_ids=key_arr[:, 1].copy(),
        country_ids=key_arr[:, 2].copy(),
        weights=np.array(weights, dtype=float),
        extras={c: ext_arr[:, j].copy() for j, c in enumerate(extra_columns)},
    )


def _fmt(x: float) -> str:
    if np.isnan(x):
        return ""
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def write_table(table: FeatureTable, path: str | PathLike, weight_column: str | None = "weight") -> None:
    """Write a table back to CSV; categorical codes are written as their labels."""
    header = list(KEY_COLUMNS) + table.feature_names + list(table.extras)
    if weight_column:
        header.append(weight_column)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(table.n_rows):
            cells = [table.student_ids[i], table.school_ids[i], table.country_ids[i]]
            for j, spec in enumerate(table.schema):
                v = table.values[i, j]
                if spec.kind == "categorical" and not np.isnan(v):
                    cells.append(spec.categories[int(v)])
                else:
                    cells.append(_fmt(v))
            cells.extend(_fmt(table.extras[c][i]) for c in table.extras)
            if weight_column:
                cells.append(_fmt(table.weights[i]))
            w.writerow(cells)


# quintiles ----------------------------------------------------------------

_SHARE_EPS = 1e-9


def assign_quintiles(values: Sequence[float], weights: Sequence[float] | None = None) -> np.ndarray:
    """Weighted quintile labels 1..5.

    Rows are ordered by value with ties broken by input position. A row's
    label is ``q`` when the weighted share of rows ordered before it lies in
    ``[(q-1)/5, q/5)``. Shares within 1e-9 of a boundary snap upward so that
    decimal weights such as 0.7 + 0.1 land on the boundary they denote.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("assign_quintiles needs at least one value")
    if not np.all(np.isfinite(v)):
        raise ValueError("assign_quintiles needs finite values")
    w = np.ones_like(v) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != v.shape:
        raise ValueError("values and weights differ in length")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    total = math.fsum(w)
    if total <= 0:
        raise ValueError("weights sum to zero")
    order = np.argsort(v, kind="stable")
    before = np.concatenate(([0.0], np.cumsum(w[order])[:-1]))
    share = before / total
    labels_sorted = np.minimum(np.floor(5.0 * share + _SHARE_EPS).astype(int) + 1, 5)
    labels = np.empty(len(v), dtype=int)
    labels[order] = labels_sorted
    return labels


# folds --------------------------------------------------------------------

@dataclass(frozen=True)
class FoldAssignment:
    k: int
    fold_of: np.ndarray
    train: tuple[np.ndarray, ...]
    validation: tuple[np.ndarray, ...]

    def __iter__(self):
        return iter(zip(self.train, self.validation))


def stratified_undersampled_folds(labels: Sequence[int], k: int = 5, seed: int = 0) -> FoldAssignment:
    """Stratified k-fold split whose training sides are undersampled to 1:1.

    Each class is shuffled and dealt round-robin across folds, so per-fold
    class counts differ from the proportional share by less than one row.
    Validation folds keep the natural class balance.
    """
    y = np.asarray(labels)
    if k < 2:
        raise ValueError("k must be at least 2")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be binary 0/1")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(y), dtype=int)
    for cls in (1, 0):
        members = np.flatnonzero(y == cls)
        if len(members) < k:
            raise ValueError(f"class {cls} has {len(members)} members, fewer than k={k}")
        shuffled = rng.permutation(members)
        fold_of[shuffled] = np.arange(len(shuffled)) % k
    train, validation = [], []
    for f in range(k):
        validation.append(np.flatnonzero(fold_of == f))
        pool = np.flatnonzero(fold_of != f)
        pos, neg = pool[y[pool] == 1], pool[y[pool] == 0]
        m = min(len(pos), len(neg))
        if len(pos) > m:
            pos = rng.choice(pos, size=m, replace=False)
        if len(neg) > m:
            neg = rng.choice(neg, size=m, replace=False)
        train.append(np.sort(np.concatenate([pos, neg])))
    return FoldAssignment(k=k, fold_of=fold_of, train=tuple(train), validation=tuple(validation))


def undersample(labels: Sequence[int], seed: int = 0) -> np.ndarray:
    """Sorted row indices of a 1:1 random undersample of the majority class."""
    y = np.asarray(labels)
    rng = np.random.default_rng(seed)
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    m = min(len(pos), len(neg))
    if m == 0:
        raise ValueError("undersampling needs both classes")
    if len(pos) > m:
        pos = rng.choice(pos, size=m, replace=False)
    if len(neg) > m:
        neg = rng.choice(neg, size=m, replace=False)
    return np.sort(np.concatenate([pos, neg]))


# group summaries ----------------------------------------------------------

@dataclass(frozen=True)
class CovariateContrast:
    name: str
    mean_a: float
    mean_b: float
    difference: float
    t: float
    p: float
    n_a: int
    n_b: int

    @property
    def defined(self) -> bool:
        return not math.isnan(self.t)

    @property
    def stars(self) -> str:
        return significance_stars(self.p)


@dataclass(frozen=True)
class GroupSummary:
    rows: tuple[CovariateContrast, ...]

    def __getitem__(self, name: str) -> CovariateContrast:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def to_csv(self, path: str | PathLike, labels: tuple[str, str] = ("A", "B")) -> None:
        a, b = labels
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["covariate", f"mean_{a}", f"mean_{b}", "difference", "t", "p", "stars", f"n_{a}", f"n_{b}"])
            for r in self.rows:
                w.writerow([r.name, _num(r.mean_a), _num(r.mean_b), _num(r.difference), _num(r.t), _num(r.p),
                            r.stars, r.n_a, r.n_b])


def _num(x: float) -> str:
    return "" if x is None or math.isnan(x) else f"{x:.6g}"


def significance_stars(p: float) -> str:
    if p is None or math.isnan(p):
        return ""
    if p <= 0.01:
        return "***"
    if p <= 0.05:
        return "**"
    if p <= 0.10:
        return "*"
    return ""


def welch_test(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Welch unequal-variance t statistic for mean(b) - mean(a), two-sided p."""
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        return math.nan, math.nan
    va, vb = np.var(a, ddof=1) / na, np.var(b, ddof=1) / nb
    se2 = va + vb
    diff = np.mean(b) - np.mean(a)
    if se2 == 0:
        if diff == 0:
            return 0.0, 1.0
        return math.nan, math.nan
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (na - 1) + vb ** 2 / (nb - 1))
    p = 2.0 * stats.t.sf(abs(t), df)
    return float(t), float(p)


def summarize_groups(table: FeatureTable, group: Sequence[int], covariates: Iterable[str] | None = None) -> GroupSummary:
    """Per-covariate group means and Welch tests; group A is ``group == 0``.

    Missing cells are dropped per covariate. A covariate with fewer than two
    non-missing rows in either group, or zero variance in both groups with
    unequal means, gets an undefined (NaN) statistic.
    """
    g = np.asarray(group).astype(bool)
    if g.shape != (table.n_rows,):
        raise ValueError("group mask length differs from table rows")
    if g.all() or not g.any():
        raise ValueError("both groups must be nonempty")
    names = table.feature_names if covariates is None else list(covariates)
    out = []
    for name in names:
        col = table.column(name)
        ok = ~np.isnan(col)
        a, b = col[ok & ~g], col[ok & g]
        ma = float(np.mean(a)) if len(a) else math.nan
        mb = float(np.mean(b)) if len(b) else math.nan
        t, p = welch_test(a, b)
        out.append(CovariateContrast(name, ma, mb, mb - ma, t, p, len(a), len(b)))
    return GroupSummary(tuple(out))
