"""L1/L2-penalized logistic regression baseline.

The objective follows the usual inverse-regularization convention::

    sum_i logloss_i + (1/C) * penalty(w)      penalty = ||w||_1  or  0.5 * ||w||_2^2

It is minimized internally in the equivalent per-row form (divided by n) so
convergence tolerances do not scale with sample size. Features are
standardized (mean 0, scale 1) and missing cells mean-imputed before
fitting; the intercept is never penalized.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from os import PathLike

import numpy as np
from scipy import linalg
from scipy.special import expit


# a per-sd log-odds slope beyond this signals separation rather than signal
_SEPARATION_LIMIT = 15.0


class LinearConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LinearParams:
    penalty: str = "l2"
    C: float = 1.0

    def __post_init__(self):
        if self.penalty not in ("l1", "l2", "none"):
            raise ValueError(f"unknown penalty {self.penalty!r}")
        if not self.C > 0:
            raise ValueError("C must be positive")

    def label(self) -> str:
        return f"logit penalty={self.penalty.upper()} C={self.C:g}"

    def to_dict(self) -> dict:
        return {"arm": "logit", "penalty": self.penalty, "C": self.C}


@dataclass(frozen=True)
class LinearModel:
    weights: np.ndarray
    intercept: float
    penalty: str
    C: float
    mean: np.ndarray
    scale: np.ndarray
    dropped: tuple[int, ...] = ()
    iterations: int = 0
    converged: bool = True
    objective_trace: tuple[float, ...] = ()

    @property
    def n_features(self) -> int:
        return len(self.mean)

    def standardize(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"row width {X.shape[1]} does not match model width {self.n_features}")
        Z = (X - self.mean) / self.scale
        return np.where(np.isnan(Z), 0.0, Z)

    def decision_function(self, X) -> np.ndarray:
        return self.standardize(X) @ self.weights + self.intercept

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.decision_function(X))

    def raw_coefficients(self) -> tuple[float, np.ndarray]:
        """Intercept and slopes on the original (unstandardized) feature scale."""
        slopes = self.weights / self.scale
        return float(self.intercept - slopes @ self.mean), slopes

    def to_dict(self) -> dict:
        return {
            "penalty": self.penalty, "C": self.C, "intercept": self.intercept,
            "weights": self.weights.tolist(), "mean": self.mean.tolist(), "scale": self.scale.tolist(),
            "dropped": list(self.dropped), "iterations": self.iterations, "converged": self.converged,
        }

    def dump(self, path: str | PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        return cls(weights=np.array(d["weights"]), intercept=d["intercept"], penalty=d["penalty"], C=d["C"],
                   mean=np.array(d["mean"]), scale=np.array(d["scale"]), dropped=tuple(d.get("dropped", ())),
                   iterations=d.get("iterations", 0), converged=d.get("converged", True))


def predict_linear(model: LinearModel, row) -> float:
    return float(model.predict_proba(np.asarray(row, dtype=float)[None, :])[0])


def _standardization(X: np.ndarray):
    mean = np.nanmean(np.where(np.all(np.isnan(X), axis=0), 0.0, X), axis=0)
    mean = np.where(np.isnan(mean), 0.0, mean)
    filled = np.where(np.isnan(X), mean, X)
    scale = filled.std(axis=0)
    dropped = tuple(int(j) for j in np.flatnonzero(scale == 0))
    scale = np.where(scale == 0, 1.0, scale)
    return mean, scale, dropped


def _mean_loss(Z, y, w, b):
    eta = Z @ w + b
    return float(np.mean(np.logaddexp(0.0, eta) - y * eta))


def penalized_objective(model: LinearModel, X, y) -> float:
    """Per-row objective: mean logloss + penalty / (C n)."""
    Z = model.standardize(X)
    y = np.asarray(y, dtype=float)
    lam = 0.0 if model.penalty == "none" else 1.0 / (model.C * len(y))
    pen = np.abs(model.weights).sum() if model.penalty == "l1" else 0.5 * float(model.weights @ model.weights)
    return _mean_loss(Z, y, model.weights, model.intercept) + lam * pen


def loss_gradient(model: LinearModel, X, y) -> tuple[float, np.ndarray]:
    """Gradient of the mean logloss (no penalty) in (intercept, weights)."""
    Z = model.standardize(X)
    r = expit(Z @ model.weights + model.intercept) - np.asarray(y, dtype=float)
    return float(r.mean()), Z.T @ r / len(r)


def fit_penalized_logit(X, y, penalty: str = "l2", C: float = 1.0, *, tol: float = 1e-8,
                        max_iter: int = 20000) -> LinearModel:
    """Fit the penalized logit by damped Newton (L2, none) or proximal gradient (L1).

    Convergence is declared when the max-norm of the (sub)gradient optimality
    residual of the per-row objective falls below ``tol``. Constant columns are
    dropped with a warning and keep a zero weight.
    """
    params = LinearParams(penalty, C)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("labels must be 0/1")
    if y.min() == y.max():
        raise ValueError("both classes must be present")
    n, m = X.shape
    mean, scale, dropped = _standardization(X)
    if dropped:
        warnings.warn(f"dropping constant features {list(dropped)}", LinearConvergenceWarning, stacklevel=2)
    Z = np.where(np.isnan(X), 0.0, (X - mean) / scale)
    keep = np.setdiff1d(np.arange(m), dropped)
    Zk = Z[:, keep]
    lam = 0.0 if params.penalty == "none" else 1.0 / (params.C * n)

    rate = y.mean()
    b = math.log(rate / (1 - rate))
    w = np.zeros(len(keep))
    trace = []
    if params.penalty == "l1":
        w, b, it, ok, trace = _prox_gradient(Zk, y, w, b, lam, tol, max_iter)
    else:
        w, b, it, ok, trace = _newton(Zk, y, w, b, lam, tol, min(max_iter, 500))
    if not ok:
        warnings.warn(
            f"penalized logit did not converge in {it} iterations (penalty={penalty}, C={C}); "
            "the classes may be (quasi-)separated",
            LinearConvergenceWarning, stacklevel=2,
        )
    elif np.max(np.abs(w), initial=0.0) > _SEPARATION_LIMIT:
        # the gradient also vanishes along a diverging direction, so check the size
        warnings.warn(
            f"standardized weight {np.max(np.abs(w)):.1f} exceeds {_SEPARATION_LIMIT:g} "
            f"(penalty={penalty}, C={C}); the classes may be (quasi-)separated",
            LinearConvergenceWarning, stacklevel=2,
        )
    full = np.zeros(m)
    full[keep] = w
    return LinearModel(weights=full, intercept=float(b), penalty=params.penalty, C=params.C, mean=mean,
                       scale=scale, dropped=dropped, iterations=it, converged=ok, objective_trace=tuple(trace))


def _newton(Z, y, w, b, lam, tol, max_iter):
    n, m = Z.shape
    A = np.column_stack([np.ones(n), Z])
    theta = np.r_[b, w]
    reg = np.r_[0.0, np.full(m, lam)]

    def objective(th):
        return _mean_loss(Z, y, th[1:], th[0]) + 0.5 * lam * float(th[1:] @ th[1:])

    obj = objective(theta)
    trace = [obj]
    for it in range(1, max_iter + 1):
        p = expit(A @ theta)
        grad = A.T @ (p - y) / n + reg * theta
        if np.max(np.abs(grad)) < tol:
            return theta[1:], theta[0], it - 1, True, trace
        H = (A * (p * (1 - p))[:, None]).T @ A / n + np.diag(reg)
        H[np.diag_indices_from(H)] += 1e-12
        step = linalg.solve(H, grad, assume_a="pos")
        t = 1.0
        while True:
            cand = theta - t * step
            new = objective(cand)
            if new <= obj or t < 1e-12:
                break
            t *= 0.5
        if new > obj:
            return theta[1:], theta[0], it, False, trace
        theta, obj = cand, new
        trace.append(obj)
    p = expit(A @ theta)
    grad = A.T @ (p - y) / n + reg * theta
    return theta[1:], theta[0], max_iter, bool(np.max(np.abs(grad)) < tol), trace


def _l1_residual(Z, y, w, b, lam):
    r = expit(Z @ w + b) - y
    gb = r.mean()
    gw = Z.T @ r / len(y)
    res = np.where(w != 0, np.abs(gw + lam * np.sign(w)), np.maximum(np.abs(gw) - lam, 0.0))
    return max(abs(gb), float(res.max()) if len(res) else 0.0)


def _prox_gradient(Z, y, w, b, lam, tol, max_iter):
    """Monotone FISTA with backtracking: accelerated, but the objective never increases."""
    n = len(y)

    def smooth(ww, bb):
        return _mean_loss(Z, y, ww, bb)

    def full(ww, bb):
        return smooth(ww, bb) + lam * np.abs(ww).sum()

    # Lipschitz bound of the mean logloss gradient, intercept included
    A = np.column_stack([np.ones(n), Z])
    step = 4.0 * n / float(linalg.norm(A, 2) ** 2)
    obj = full(w, b)
    trace = [obj]
    vw, vb, t_acc = w.copy(), b, 1.0
    for it in range(1, max_iter + 1):
        if _l1_residual(Z, y, w, b, lam) < tol:
            return w, b, it - 1, True, trace
        r = expit(Z @ vw + vb) - y
        gw, gb = Z.T @ r / n, r.mean()
        f0 = smooth(vw, vb)
        t = step * 2.0
        while True:
            u = vw - t * gw
            nw = np.sign(u) * np.maximum(np.abs(u) - t * lam, 0.0)
            nb = vb - t * gb
            dw, db = nw - vw, nb - vb
            if smooth(nw, nb) <= f0 + gw @ dw + gb * db + (dw @ dw + db * db) / (2 * t) + 1e-15 or t < 1e-12:
                break
            t *= 0.5
        step = t
        cand = full(nw, nb)
        t_next = 0.5 * (1 + math.sqrt(1 + 4 * t_acc * t_acc))
        if cand <= obj:
            xw, xb, obj = nw, nb, cand
        else:
            xw, xb = w, b
        # MFISTA extrapolation
        vw = xw + (t_acc / t_next) * (nw - xw) + ((t_acc - 1) / t_next) * (xw - w)
        vb = xb + (t_acc / t_next) * (nb - xb) + ((t_acc - 1) / t_next) * (xb - b)
        w, b, t_acc = xw, xb, t_next
        trace.append(obj)
    return w, b, max_iter, _l1_residual(Z, y, w, b, lam) < tol, trace
