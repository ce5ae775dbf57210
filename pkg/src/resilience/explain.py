"""Exact Shapley attributions for boosted tree ensembles.

Attributions live in margin (log-odds) space and use path-dependent
conditioning: a feature outside the coalition is integrated out by
descending both children in proportion to their training cover. The fast
path is the polynomial tree recursion that tracks the proportion of
coalitions flowing down each path; it runs once per tree for all rows at
once, since the traversal itself does not depend on the row. The subset
and permutation enumerations below are oracles for tests, not for
production use.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from os import PathLike
from typing import Sequence

import numpy as np

from .dataset import FeatureTable
from .gbt import BoostedEnsemble, Tree

MAX_BRUTE_FORCE_FEATURES = 15


def _goes_left(tree: Tree, node: int, X: np.ndarray) -> np.ndarray:
    x = X[:, tree.feature[node]]
    return np.where(np.isnan(x), tree.default_left[node], x < tree.threshold[node])


def _as_rows(ensemble: BoostedEnsemble, X) -> np.ndarray:
    X = np.asarray(X.values if isinstance(X, FeatureTable) else X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != ensemble.n_features:
        raise ValueError(f"row width {X.shape[1]} does not match model width {ensemble.n_features}")
    return X


# conditional expectation (the set function)


def _tree_conditional(tree: Tree, X: np.ndarray, in_s: np.ndarray) -> np.ndarray:
    out = np.zeros(len(X))
    stack = [(0, np.ones(len(X)))]
    while stack:
        node, w = stack.pop()
        if tree.feature[node] < 0:
            out += w * tree.weight[node]
            continue
        lft, rgt = tree.left[node], tree.right[node]
        if in_s[tree.feature[node]]:
            gl = _goes_left(tree, node, X)
            stack.append((rgt, w * ~gl))
            stack.append((lft, w * gl))
        else:
            c = tree.cover[node]
            stack.append((rgt, w * (tree.cover[rgt] / c)))
            stack.append((lft, w * (tree.cover[lft] / c)))
    return out


def conditional_expectations(ensemble: BoostedEnsemble, X, subset) -> np.ndarray:
    """E[f(x) | x_S] per row, by cover-weighted traversal, in margin space."""
    X = _as_rows(ensemble, X)
    in_s = np.zeros(ensemble.n_features, dtype=bool)
    idx = list(subset)
    if any(not 0 <= i < ensemble.n_features for i in idx):
        raise ValueError("subset contains an unknown feature index")
    in_s[idx] = True
    out = np.full(len(X), ensemble.base_margin)
    for t in ensemble.trees:
        out += _tree_conditional(t, X, in_s)
    return out


def conditional_expectation(ensemble: BoostedEnsemble, row, subset) -> float:
    return float(conditional_expectations(ensemble, np.asarray(row, dtype=float)[None, :], subset)[0])


def expected_value(ensemble: BoostedEnsemble) -> float:
    """phi_0: the conditional expectation given no features."""
    total = ensemble.base_margin
    for t in ensemble.trees:
        vals = np.zeros(t.n_nodes)
        # children always have larger indices than their parent, so sweep backwards
        for node in range(t.n_nodes - 1, -1, -1):
            if t.feature[node] < 0:
                vals[node] = t.weight[node]
            else:
                lft, rgt = t.left[node], t.right[node]
                vals[node] = (t.cover[lft] * vals[lft] + t.cover[rgt] * vals[rgt]) / t.cover[node]
        total += vals[0]
    return float(total)


# path-tracking tree recursion, vectorized over rows


class _Path:
    """Unique-feature path: weights and one-fractions per row, zero-fractions shared."""

    __slots__ = ("feat", "zero", "one", "pw")

    def __init__(self, n, cap):
        self.feat = np.full(cap, -1, dtype=np.int64)
        self.zero = np.zeros(cap)
        self.one = np.zeros((n, cap))
        self.pw = np.zeros((n, cap))

    def copy(self):
        p = _Path.__new__(_Path)
        p.feat, p.zero, p.one, p.pw = self.feat.copy(), self.zero.copy(), self.one.copy(), self.pw.copy()
        return p

    def extend(self, d, zero, one, feat):
        self.feat[d], self.zero[d], self.one[:, d] = feat, zero, one
        self.pw[:, d] = 1.0 if d == 0 else 0.0
        for i in range(d - 1, -1, -1):
            self.pw[:, i + 1] += one * self.pw[:, i] * ((i + 1) / (d + 1))
            self.pw[:, i] = zero * self.pw[:, i] * ((d - i) / (d + 1))

    def unwind(self, d, k):
        one, zero = self.one[:, k].copy(), self.zero[k]
        hot = one != 0
        safe = np.where(hot, one, 1.0)
        nxt = self.pw[:, d].copy()
        for i in range(d - 1, -1, -1):
            tmp = self.pw[:, i].copy()
            a = nxt * (d + 1) / ((i + 1) * safe)
            b = tmp * (d + 1) / (zero * (d - i))
            self.pw[:, i] = np.where(hot, a, b)
            nxt = np.where(hot, tmp - self.pw[:, i] * zero * (d - i) / (d + 1), nxt)
        self.feat[k:d] = self.feat[k + 1:d + 1]
        self.zero[k:d] = self.zero[k + 1:d + 1]
        self.one[:, k:d] = self.one[:, k + 1:d + 1]

    def unwound_sum(self, d, k) -> np.ndarray:
        one, zero = self.one[:, k], self.zero[k]
        hot = one != 0
        safe = np.where(hot, one, 1.0)
        nxt = self.pw[:, d].copy()
        total = np.zeros(len(one))
        for i in range(d - 1, -1, -1):
            tmp = nxt * (d + 1) / ((i + 1) * safe)
            cold = (self.pw[:, i] / zero) / ((d - i) / (d + 1)) if zero != 0 else 0.0
            total += np.where(hot, tmp, cold)
            nxt = np.where(hot, self.pw[:, i] - tmp * zero * ((d - i) / (d + 1)), nxt)
        return total


def _tree_depth(tree: Tree) -> int:
    depth = np.zeros(tree.n_nodes, dtype=np.int64)
    for node in range(tree.n_nodes):
        if tree.feature[node] >= 0:
            depth[tree.left[node]] = depth[tree.right[node]] = depth[node] + 1
    return int(depth.max())


def _tree_shap(tree: Tree, X: np.ndarray, phi: np.ndarray, condition: int = 0, cond_feature: int = -1) -> None:
    """Accumulate one tree's attributions into ``phi`` (n x M).

    ``condition`` +1/-1 fixes ``cond_feature`` on/off, which yields the
    pieces of the interaction index.
    """
    n = len(X)
    cap = _tree_depth(tree) + 2

    def recurse(node, parent: _Path, d, pzero, pone, pfeat, cfrac):
        if not np.any(cfrac):
            return
        path = parent.copy()
        if condition == 0 or pfeat != cond_feature:
            path.extend(d, pzero, pone, pfeat)
        if tree.feature[node] < 0:
            leaf = tree.weight[node] * cfrac
            for i in range(1, d + 1):
                w = path.unwound_sum(d, i)
                phi[:, path.feat[i]] += w * (path.one[:, i] - path.zero[i]) * leaf
            return
        f = int(tree.feature[node])
        lft, rgt = tree.left[node], tree.right[node]
        gl = _goes_left(tree, node, X).astype(float)
        zl, zr = tree.cover[lft] / tree.cover[node], tree.cover[rgt] / tree.cover[node]
        izero, ione = 1.0, np.ones(n)
        hits = np.flatnonzero(path.feat[1:d + 1] == f)
        if len(hits):
            k = int(hits[0]) + 1
            izero, ione = path.zero[k], path.one[:, k].copy()
            path.unwind(d, k)
            d -= 1
        cl, cr = cfrac, cfrac
        if condition > 0 and f == cond_feature:
            cl, cr = cfrac * gl, cfrac * (1.0 - gl)
            d -= 1
        elif condition < 0 and f == cond_feature:
            cl, cr = cfrac * zl, cfrac * zr
            d -= 1
        recurse(lft, path, d + 1, zl * izero, gl * ione, f, cl)
        recurse(rgt, path, d + 1, zr * izero, (1.0 - gl) * ione, f, cr)

    recurse(0, _Path(n, cap), 0, 1.0, np.ones(n), -1, np.ones(n))


def _row_keys(X, keys):
    if keys is not None:
        return tuple(str(k) for k in keys)
    if isinstance(X, FeatureTable):
        return tuple(str(k) for k in X.student_ids)
    return tuple(str(i) for i in range(len(np.atleast_2d(X))))


@dataclass(frozen=True)
class ShapMatrix:
    base_value: float
    values: np.ndarray
    row_keys: tuple[str, ...]
    feature_names: tuple[str, ...]

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def totals(self) -> np.ndarray:
        return self.values.sum(axis=1)

    def to_csv(self, path: str | PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row_key", *self.feature_names, "base_value"])
            for key, row in zip(self.row_keys, self.values):
                w.writerow([key, *map(repr, row.tolist()), repr(self.base_value)])

    @classmethod
    def read_csv(cls, path: str | PathLike) -> "ShapMatrix":
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        vals = np.array([[float(x) for x in r[1:-1]] for r in body]).reshape(len(body), len(header) - 2)
        base = float(body[0][-1]) if body else math.nan
        return cls(base, vals, tuple(r[0] for r in body), tuple(header[1:-1]))


def _names(ensemble: BoostedEnsemble) -> tuple[str, ...]:
    if ensemble.feature_names:
        return tuple(ensemble.feature_names)
    return tuple(f"x{i}" for i in range(ensemble.n_features))


def shap_matrix(ensemble: BoostedEnsemble, X, row_keys: Sequence | None = None) -> ShapMatrix:
    """Attributions for every row; phi_0 + sum(phi) equals the margin."""
    keys = _row_keys(X, row_keys)
    X = _as_rows(ensemble, X)
    phi = np.zeros_like(X)
    for t in ensemble.trees:
        _tree_shap(t, X, phi)
    return ShapMatrix(expected_value(ensemble), phi, keys, _names(ensemble))


def shap_values(ensemble: BoostedEnsemble, row) -> tuple[float, np.ndarray]:
    m = shap_matrix(ensemble, np.asarray(row, dtype=float)[None, :])
    return m.base_value, m.values[0]


# interactions


@dataclass(frozen=True)
class InteractionTensor:
    values: np.ndarray  # n x M x M
    row_keys: tuple[str, ...]
    feature_names: tuple[str, ...]

    def matrix(self, row: int) -> np.ndarray:
        return self.values[row]

    def row_to_csv(self, row: int, path: str | PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", *self.feature_names])
            for name, r in zip(self.feature_names, self.values[row]):
                w.writerow([name, *map(repr, r.tolist())])


def _used_features(ensemble: BoostedEnsemble) -> list[int]:
    used = set()
    for t in ensemble.trees:
        used.update(int(f) for f in t.feature[t.feature >= 0])
    return sorted(used)


def shap_interactions(ensemble: BoostedEnsemble, X, row_keys: Sequence | None = None) -> InteractionTensor:
    """Shapley interaction values; off-diagonals split each pairwise effect in half."""
    keys = _row_keys(X, row_keys)
    X = _as_rows(ensemble, X)
    n, m = X.shape
    phi = np.zeros((n, m))
    for t in ensemble.trees:
        _tree_shap(t, X, phi)
    out = np.zeros((n, m, m))
    tree_features = [set(t.feature[t.feature >= 0].tolist()) for t in ensemble.trees]
    for j in _used_features(ensemble):
        on, off = np.zeros((n, m)), np.zeros((n, m))
        for t, used in zip(ensemble.trees, tree_features):
            # a tree that never splits on j contributes equally to both halves
            if j not in used:
                continue
            _tree_shap(t, X, on, 1, j)
            _tree_shap(t, X, off, -1, j)
        out[:, j, :] = (on - off) / 2.0
        out[:, j, j] = 0.0
        out[:, j, j] = phi[:, j] - out[:, j, :].sum(axis=1)
    return InteractionTensor(out, keys, _names(ensemble))


# brute-force oracles


def _all_subset_values(ensemble: BoostedEnsemble, X: np.ndarray) -> np.ndarray:
    m = ensemble.n_features
    if m > MAX_BRUTE_FORCE_FEATURES:
        raise ValueError(f"brute force needs at most {MAX_BRUTE_FORCE_FEATURES} features, got {m}")
    vals = np.empty((1 << m, len(X)))
    for mask in range(1 << m):
        vals[mask] = conditional_expectations(ensemble, X, [i for i in range(m) if mask >> i & 1])
    return vals


def shap_brute_force(ensemble: BoostedEnsemble, X) -> np.ndarray:
    """Shapley values by enumerating every coalition (cost 2^M)."""
    X = _as_rows(ensemble, X)
    m = ensemble.n_features
    vals = _all_subset_values(ensemble, X)
    phi = np.zeros((len(X), m))
    for i in range(m):
        for mask in range(1 << m):
            if mask >> i & 1:
                continue
            s = bin(mask).count("1")
            w = math.factorial(s) * math.factorial(m - s - 1) / math.factorial(m)
            phi[:, i] += w * (vals[mask | 1 << i] - vals[mask])
    return phi


def shap_permutation_oracle(ensemble: BoostedEnsemble, X) -> np.ndarray:
    """Shapley values as the average marginal contribution over all orderings."""
    X = _as_rows(ensemble, X)
    m = ensemble.n_features
    if m > 8:
        raise ValueError("the permutation oracle is limited to 8 features")
    vals = _all_subset_values(ensemble, X)
    phi = np.zeros((len(X), m))
    count = 0
    for perm in itertools.permutations(range(m)):
        mask = 0
        for i in perm:
            phi[:, i] += vals[mask | 1 << i] - vals[mask]
            mask |= 1 << i
        count += 1
    return phi / count


def interactions_brute_force(ensemble: BoostedEnsemble, X) -> np.ndarray:
    """Shapley interaction index by coalition enumeration; diagonal by the row-sum identity."""
    X = _as_rows(ensemble, X)
    m = ensemble.n_features
    vals = _all_subset_values(ensemble, X)
    phi = shap_brute_force(ensemble, X)
    out = np.zeros((len(X), m, m))
    for i in range(m):
        for j in range(i + 1, m):
            acc = np.zeros(len(X))
            for mask in range(1 << m):
                if mask >> i & 1 or mask >> j & 1:
                    continue
                s = bin(mask).count("1")
                w = math.factorial(s) * math.factorial(m - s - 2) / (2 * math.factorial(m - 1))
                acc += w * (vals[mask | 1 << i | 1 << j] - vals[mask | 1 << i] - vals[mask | 1 << j] + vals[mask])
            out[:, i, j] = out[:, j, i] = acc
    for i in range(m):
        out[:, i, i] = phi[:, i] - out[:, i, :].sum(axis=1)
    return out


# summaries


@dataclass(frozen=True)
class ImportanceRanking:
    feature_names: tuple[str, ...]
    mean_abs: np.ndarray
    order: np.ndarray

    def top(self, n: int | None = None) -> list[tuple[str, float]]:
        idx = self.order if n is None else self.order[:n]
        return [(self.feature_names[i], float(self.mean_abs[i])) for i in idx]

    def to_csv(self, path: str | PathLike, top_n: int | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("rank,feature,mean_abs_shap\n")
            for r, (name, v) in enumerate(self.top(top_n), 1):
                fh.write(f"{r},{name},{v!r}\n")


def global_importance(shap: ShapMatrix, top_n: int | None = None) -> ImportanceRanking:
    if shap.n_rows == 0:
        raise ValueError("empty SHAP matrix")
    mean_abs = np.abs(shap.values).mean(axis=0)
    order = np.argsort(-mean_abs, kind="stable")
    if top_n is not None:
        order = order[:top_n]
    return ImportanceRanking(shap.feature_names, mean_abs, order)


@dataclass(frozen=True)
class BeeswarmRecord:
    row_key: str
    feature: str
    shap: float
    value: float
    color: float
    missing: bool
    jitter_seed: int


BEESWARM_HEADER = ("row_key", "feature", "shap", "value", "color", "missing", "jitter_seed")


def beeswarm_export(shap: ShapMatrix, X, features: Sequence[str]) -> list[BeeswarmRecord]:
    """Per (row, feature) plot records; colour is min-max scaled, 0.5 for a constant column."""
    values = np.asarray(X.values if isinstance(X, FeatureTable) else X, dtype=float)
    records = []
    m = len(shap.feature_names)
    for name in features:
        if name not in shap.feature_names:
            raise KeyError(f"unknown feature {name!r}")
        j = shap.feature_names.index(name)
        col = values[:, j]
        seen = col[~np.isnan(col)]
        lo, hi = (seen.min(), seen.max()) if len(seen) else (0.0, 0.0)
        for r, key in enumerate(shap.row_keys):
            v = float(col[r])
            miss = math.isnan(v)
            color = math.nan if miss else (0.5 if hi == lo else float((v - lo) / (hi - lo)))
            records.append(BeeswarmRecord(key, name, float(shap.values[r, j]), v, color, miss, r * m + j))
    return records


def write_beeswarm_csv(records: Sequence[BeeswarmRecord], path: str | PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BEESWARM_HEADER)
        for rec in records:
            w.writerow([rec.row_key, rec.feature, repr(rec.shap), repr(rec.value), repr(rec.color),
                        int(rec.missing), rec.jitter_seed])


def read_beeswarm_csv(path: str | PathLike) -> list[BeeswarmRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [BeeswarmRecord(r[0], r[1], float(r[2]), float(r[3]), float(r[4]), r[5] == "1", int(r[6]))
            for r in rows]


@dataclass(frozen=True)
class Profile:
    row_key: str
    row: int
    total: float
    contributions: tuple[tuple[str, float, float], ...]  # (feature, phi, raw value)


@dataclass(frozen=True)
class LocalProfiles:
    max_profile: Profile
    min_profile: Profile

    def to_csv(self, path: str | PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["profile", "row_key", "total", "feature", "shap", "value"])
            for label, p in (("max", self.max_profile), ("min", self.min_profile)):
                for name, phi, val in p.contributions:
                    w.writerow([label, p.row_key, repr(p.total), name, repr(phi), repr(val)])


def local_profiles(shap: ShapMatrix, X, top_k: int = 5) -> LocalProfiles:
    """Rows with the largest and smallest summed attribution, with their top-k features by |phi|."""
    if shap.n_rows == 0:
        raise ValueError("empty SHAP matrix")
    values = np.asarray(X.values if isinstance(X, FeatureTable) else X, dtype=float)
    totals = shap.totals()

    def profile(r):
        order = np.argsort(-np.abs(shap.values[r]), kind="stable")[:top_k]
        contrib = tuple((shap.feature_names[j], float(shap.values[r, j]), float(values[r, j])) for j in order)
        return Profile(shap.row_keys[r], int(r), float(totals[r]), contrib)

    return LocalProfiles(profile(int(np.argmax(totals))), profile(int(np.argmin(totals))))
