"""Second-order gradient-boosted trees for binary outcomes.

Each round fits a regression tree to the logistic-loss gradients and
hessians at the current margins, choosing splits by the regularized gain

    0.5 * [GL^2/(HL+lam) + GR^2/(HR+lam) - (GL+GR)^2/(HL+HR+lam)] - gamma

with an exact sorted scan. A row goes left when ``x < threshold``; the
threshold is the first value on the right side, so thresholds are order
statistics of the training column. Missing values follow a default direction
learned at each split. Leaf weights are stored after shrinkage, so the
margin is the base margin plus a plain sum of leaf values.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from os import PathLike
from typing import Sequence

import numpy as np
from scipy.special import expit

from .dataset import FeatureTable, FoldAssignment
from .linear import LinearParams, fit_penalized_logit
from .metrics import auprc, auroc

# gains at or below this are treated as no improvement (float noise)
_MIN_GAIN = 1e-10


@dataclass(frozen=True)
class GbtParams:
    n_estimators: int = 100
    learning_rate: float = 0.1
    max_depth: int = 3
    subsample: float = 1.0
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_hessian: float = 1.0
    seed: int = 0
    base_score: float | None = None

    def __post_init__(self):
        if self.n_estimators < 0:
            raise ValueError("n_estimators must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must lie in (0, 1]")
        if self.reg_lambda < 0 or self.gamma < 0 or self.min_child_hessian < 0:
            raise ValueError("reg_lambda, gamma and min_child_hessian must be >= 0")
        if self.base_score is not None and not 0 < self.base_score < 1:
            raise ValueError("base_score must lie in (0, 1)")

    def label(self) -> str:
        return (f"gbt K={self.n_estimators} eta={self.learning_rate:g} depth={self.max_depth} "
                f"subsample={self.subsample:g}")

    def to_dict(self) -> dict:
        return {"arm": "gbt", **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "GbtParams":
        return cls(**{k: v for k, v in d.items() if k != "arm"})


def split_gain(GL: float, HL: float, GR: float, HR: float, reg_lambda: float = 1.0, gamma: float = 0.0) -> float:
    if HL < 0 or HR < 0:
        raise ValueError("hessian sums must be non-negative")
    return 0.5 * (GL * GL / (HL + reg_lambda) + GR * GR / (HR + reg_lambda)
                  - (GL + GR) ** 2 / (HL + HR + reg_lambda)) - gamma


@dataclass(frozen=True)
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf. Node 0 is the root."""

    feature: np.ndarray
    threshold: np.ndarray
    default_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    cover: np.ndarray
    weight: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row (the structure function q)."""
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while len(active):
            nd = node[active]
            x = X[active, self.feature[nd]]
            go_left = np.where(np.isnan(x), self.default_left[nd], x < self.threshold[nd])
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.weight[self.apply(X)]

    def to_list(self) -> list[dict]:
        return [
            {"feature": int(self.feature[i]), "threshold": float(self.threshold[i]),
             "default": "left" if self.default_left[i] else "right",
             "left": int(self.left[i]), "right": int(self.right[i]),
             "cover": float(self.cover[i]), "weight": float(self.weight[i])}
            for i in range(self.n_nodes)
        ]

    @classmethod
    def from_list(cls, nodes: list[dict]) -> "Tree":
        return cls(
            feature=np.array([n["feature"] for n in nodes], dtype=np.int64),
            threshold=np.array([n["threshold"] for n in nodes], dtype=float),
            default_left=np.array([n["default"] == "left" for n in nodes], dtype=bool),
            left=np.array([n["left"] for n in nodes], dtype=np.int64),
            right=np.array([n["right"] for n in nodes], dtype=np.int64),
            cover=np.array([n["cover"] for n in nodes], dtype=float),
            weight=np.array([n["weight"] for n in nodes], dtype=float),
        )


@dataclass(frozen=True)
class BoostedEnsemble:
    base_margin: float
    trees: tuple[Tree, ...]
    params: GbtParams
    n_features: int
    feature_names: tuple[str, ...] = ()
    training_loss: tuple[float, ...] = field(default=(), compare=False)

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"row width {X.shape[1]} does not match model width {self.n_features}")
        return X

    def tree_contributions(self, X) -> np.ndarray:
        X = self._check(X)
        if not self.trees:
            return np.zeros((len(X), 0))
        return np.column_stack([t.predict(X) for t in self.trees])

    def predict_margin(self, X) -> np.ndarray:
        X = self._check(X)
        margin = np.full(len(X), self.base_margin)
        for t in self.trees:
            margin += t.predict(X)
        return margin

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.predict_margin(X))

    def to_dict(self) -> dict:
        return {
            "base_margin": self.base_margin, "M": self.n_features, "feature_names": list(self.feature_names),
            "params": self.params.to_dict(), "training_loss": list(self.training_loss),
            "trees": [t.to_list() for t in self.trees],
        }

    def dump(self, path: str | PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> "BoostedEnsemble":
        return cls(base_margin=d["base_margin"], trees=tuple(Tree.from_list(t) for t in d["trees"]),
                   params=GbtParams.from_dict(d["params"]), n_features=d["M"],
                   feature_names=tuple(d.get("feature_names", ())),
                   training_loss=tuple(d.get("training_loss", ())))

    @classmethod
    def load(cls, path: str | PathLike) -> "BoostedEnsemble":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def predict(ensemble: BoostedEnsemble, row, output: str = "probability") -> float:
    if output not in ("margin", "probability"):
        raise ValueError("output must be 'margin' or 'probability'")
    m = float(ensemble.predict_margin(np.asarray(row, dtype=float)[None, :])[0])
    return m if output == "margin" else float(expit(m))


def as_matrix(data) -> tuple[np.ndarray, tuple[str, ...]]:
    if isinstance(data, FeatureTable):
        return np.asarray(data.values, dtype=float), tuple(data.feature_names)
    X = np.asarray(data, dtype=float)
    if X.ndim != 2:
        raise ValueError("feature matrix must be two-dimensional")
    return X, ()


class _Grower:
    def __init__(self, X, g, h, rows, p: GbtParams):
        self.X, self.g, self.h, self.p = X, g, h, p
        self.nodes: list[list] = []
        n, m = X.shape
        # per-feature non-missing rows of this sample, sorted by value (stable)
        self.sorted0 = []
        for f in range(m):
            col = X[rows, f]
            ok = ~np.isnan(col)
            r = rows[ok]
            self.sorted0.append(r[np.argsort(X[r, f], kind="stable")])
        self.in_left = np.zeros(n, dtype=bool)

    def _new(self, cover):
        self.nodes.append([-1, 0.0, True, -1, -1, cover, 0.0])
        return len(self.nodes) - 1

    def grow(self, rows):
        root = self._new(float(np.sum(self.h[rows])))
        stack = [(root, rows, self.sorted0, 0)]
        while stack:
            node, rows, sorted_f, depth = stack.pop()
            G = float(np.sum(self.g[rows]))
            H = float(np.sum(self.h[rows]))
            best = self._best_split(rows, sorted_f, G, H) if depth < self.p.max_depth else None
            if best is None:
                self.nodes[node][6] = -G / (H + self.p.reg_lambda) * self.p.learning_rate
                continue
            f, thr, dleft = best
            x = self.X[rows, f]
            go_left = np.where(np.isnan(x), dleft, x < thr)
            lrows, rrows = rows[go_left], rows[~go_left]
            self.in_left[lrows] = True
            lsorted = [s[self.in_left[s]] for s in sorted_f]
            rsorted = [s[~self.in_left[s]] for s in sorted_f]
            self.in_left[lrows] = False
            lnode = self._new(float(np.sum(self.h[lrows])))
            rnode = self._new(float(np.sum(self.h[rrows])))
            nd = self.nodes[node]
            nd[0], nd[1], nd[2], nd[3], nd[4] = f, thr, dleft, lnode, rnode
            # internal cover is the sum of its children by definition
            nd[5] = self.nodes[lnode][5] + self.nodes[rnode][5]
            # right pushed first so the left subtree is expanded first
            stack.append((rnode, rrows, rsorted, depth + 1))
            stack.append((lnode, lrows, lsorted, depth + 1))
        return self._tree()

    def _best_split(self, rows, sorted_f, G, H):
        lam, gamma, mch = self.p.reg_lambda, self.p.gamma, self.p.min_child_hessian
        parent = G * G / (H + lam)
        best_gain, best = _MIN_GAIN, None
        for f, s in enumerate(sorted_f):
            if len(s) < 2:
                continue
            v = self.X[s, f]
            cut = np.flatnonzero(v[:-1] < v[1:])
            if not len(cut):
                continue
            gs = np.cumsum(self.g[s])
            hs = np.cumsum(self.h[s])
            Gm, Hm = G - gs[-1], H - hs[-1]
            has_missing = len(s) < len(rows)
            options = (True, False) if has_missing else (None,)
            for dleft in options:
                GL, HL = gs[cut], hs[cut]
                if dleft:
                    GL, HL = GL + Gm, HL + Hm
                GR, HR = G - GL, H - HL
                gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent) - gamma
                ok = (HL >= mch) & (HR >= mch) & (HL > 0) & (HR > 0)
                if not ok.any():
                    continue
                gain = np.where(ok, gain, -np.inf)
                i = int(np.argmax(gain))
                if gain[i] > best_gain:
                    best_gain = float(gain[i])
                    # without missing rows the default follows the heavier child
                    d = bool(HL[i] >= HR[i]) if dleft is None else dleft
                    best = (f, float(v[cut[i] + 1]), d)
        return best

    def _tree(self):
        cols = list(zip(*self.nodes))
        return Tree(feature=np.array(cols[0], dtype=np.int64), threshold=np.array(cols[1], dtype=float),
                    default_left=np.array(cols[2], dtype=bool), left=np.array(cols[3], dtype=np.int64),
                    right=np.array(cols[4], dtype=np.int64), cover=np.array(cols[5], dtype=float),
                    weight=np.array(cols[6], dtype=float))


def _logloss(y, margin) -> float:
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


def fit_gbt(data, labels, params: GbtParams | None = None) -> BoostedEnsemble:
    """Train a boosted ensemble on a feature table or matrix (NaN = missing)."""
    p = params or GbtParams()
    X, names = as_matrix(data)
    y = np.asarray(labels, dtype=float)
    if len(y) != len(X):
        raise ValueError("labels and rows differ in length")
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("labels must be 0/1")
    rate = float(y.mean())
    if p.base_score is not None:
        base = math.log(p.base_score / (1 - p.base_score))
    elif 0 < rate < 1:
        base = math.log(rate / (1 - rate))
    else:
        raise ValueError("labels contain a single class; pass base_score to train anyway")

    n = len(y)
    all_rows = np.arange(n)
    margin = np.full(n, base)
    trees, losses = [], []
    for k in range(p.n_estimators):
        prob = expit(margin)
        g = prob - y
        h = prob * (1.0 - prob)
        if p.subsample < 1.0:
            size = max(1, int(round(p.subsample * n)))
            rng = np.random.default_rng([p.seed, k])
            rows = np.sort(rng.choice(n, size=size, replace=False))
        else:
            rows = all_rows
        tree = _Grower(X, g, h, rows, p).grow(rows)
        trees.append(tree)
        margin = margin + tree.predict(X)
        losses.append(_logloss(y, margin))
    return BoostedEnsemble(base_margin=base, trees=tuple(trees), params=p, n_features=X.shape[1],
                           feature_names=names, training_loss=tuple(losses))


# grid search


@dataclass(frozen=True)
class GridResult:
    index: int
    params: GbtParams | LinearParams
    fold_auroc: tuple[float, ...]
    fold_auprc: tuple[float, ...]

    @property
    def mean_auroc(self) -> float:
        return float(np.mean(self.fold_auroc))

    @property
    def mean_auprc(self) -> float:
        return float(np.mean(self.fold_auprc))


@dataclass(frozen=True)
class GridSearchResult:
    results: tuple[GridResult, ...]
    winner: int

    @property
    def best(self) -> GridResult:
        return self.results[self.winner]

    def ranked(self) -> list[GridResult]:
        return sorted(self.results, key=lambda r: (-r.mean_auroc, -r.mean_auprc, r.index))

    def to_csv(self, path: str | PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("rank,index,arm,setting,mean_auroc,mean_auprc,winner\n")
            for rank, r in enumerate(self.ranked(), 1):
                arm = "gbt" if isinstance(r.params, GbtParams) else "logit"
                fh.write(f"{rank},{r.index},{arm},{r.params.label()},{r.mean_auroc:.6f},{r.mean_auprc:.6f},"
                         f"{int(r.index == self.winner)}\n")


def fit_model(params, X, y):
    """Fit either arm; returns an object with ``predict_proba``."""
    if isinstance(params, GbtParams):
        return fit_gbt(X, y, params)
    if isinstance(params, LinearParams):
        return fit_penalized_logit(X, y, params.penalty, params.C)
    raise TypeError(f"unsupported grid point {params!r}")


def grid_search(data, labels, grid: Sequence[GbtParams | LinearParams], folds: FoldAssignment) -> GridSearchResult:
    """Cross-validated comparison; the winner maximizes mean AUROC, then mean AUPRC, then comes first."""
    if not grid:
        raise ValueError("grid is empty")
    X, _ = as_matrix(data)
    y = np.asarray(labels, dtype=float)
    results = []
    for i, params in enumerate(grid):
        ra, rp = [], []
        for train, val in folds:
            model = fit_model(params, X[train], y[train])
            score = model.predict_proba(X[val])
            ra.append(auroc(y[val], score))
            rp.append(auprc(y[val], score))
        results.append(GridResult(i, params, tuple(ra), tuple(rp)))
    winner = min(results, key=lambda r: (-r.mean_auroc, -r.mean_auprc, r.index)).index
    return GridSearchResult(tuple(results), winner)
