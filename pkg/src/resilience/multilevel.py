"""Three-level random-intercept logistic regression (students in schools in countries).

The linear predictor is ``b0 + b1*ses + b2*school_mean_ses + u_school + v_country``
with ``u ~ N(0, s2_school)`` and ``v ~ N(0, s2_country)``. Estimation is by
penalized quasi-likelihood in its Laplace/EM form: an inner penalized
Newton-Raphson (IRLS) solve for the fixed effects and posterior-mode
intercepts at fixed variances, and an outer update

    s2 <- mean(mode**2 + conditional variance of the mode)

where the conditional variances come from the inverse penalized Hessian.
This is an approximation; it is known to shrink variance components
somewhat for binary outcomes with small clusters.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from os import PathLike

import numpy as np
from scipy import linalg
from scipy.special import expit

from .dataset import assign_quintiles

LEVEL1_VARIANCE = math.pi ** 2 / 3.0
PREDICTORS = ("intercept", "ses", "school_mean_ses")

# variance below this is treated as a boundary estimate of zero
_VARIANCE_FLOOR = 1e-6
# below this, a shrinking variance is tested against the zero boundary
_BOUNDARY_CHECK = 0.05
_CHANGE_FLOOR = 0.01
# |coef| * sd(predictor) beyond this means the likelihood has no finite maximum
_SEPARATION_LIMIT = 15.0


class SeparationError(RuntimeError):
    """The fixed-effect estimates diverge because the outcome is separable."""


class MultilevelConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MultilevelFit:
    beta0: float
    beta_ses: float
    beta_school_ses: float
    sigma2_school: float
    sigma2_country: float
    school_ids: np.ndarray
    school_country: np.ndarray
    school_mean_ses: np.ndarray
    school_intercepts: np.ndarray
    country_ids: np.ndarray
    country_intercepts: np.ndarray
    std_errors: tuple[float, float, float] = (math.nan, math.nan, math.nan)
    iterations: int = 0
    final_change: float = 0.0
    converged: bool = True
    score_norm: float = 0.0
    level1_variance: float = LEVEL1_VARIANCE
    _school_pos: dict = field(default=None, repr=False, compare=False)
    _country_pos: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_school_pos", {s: i for i, s in enumerate(self.school_ids)})
        object.__setattr__(self, "_country_pos", {c: i for i, c in enumerate(self.country_ids)})

    @property
    def beta(self) -> np.ndarray:
        return np.array([self.beta0, self.beta_ses, self.beta_school_ses])

    def school_intercept(self, school_id) -> float:
        pos = self._school_pos.get(school_id)
        return 0.0 if pos is None else float(self.school_intercepts[pos])

    def country_intercept(self, country_id) -> float:
        pos = self._country_pos.get(country_id)
        return 0.0 if pos is None else float(self.country_intercepts[pos])

    def to_dict(self) -> dict:
        return {
            "beta": dict(zip(PREDICTORS, map(float, self.beta))),
            "std_errors": dict(zip(PREDICTORS, map(float, self.std_errors))),
            "sigma2_school": self.sigma2_school,
            "sigma2_country": self.sigma2_country,
            "level1_variance": self.level1_variance,
            "schools": [
                {"id": str(s), "country": str(c), "mean_ses": float(m), "intercept": float(u)}
                for s, c, m, u in zip(self.school_ids, self.school_country, self.school_mean_ses,
                                      self.school_intercepts)
            ],
            "countries": [{"id": str(c), "intercept": float(v)}
                          for c, v in zip(self.country_ids, self.country_intercepts)],
            "convergence": {"iterations": self.iterations, "final_change": self.final_change,
                            "converged": self.converged, "score_norm": self.score_norm},
        }

    def dump(self, path: str | PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> "MultilevelFit":
        b, se = d["beta"], d.get("std_errors", {})
        conv = d.get("convergence", {})
        return cls(
            beta0=b["intercept"], beta_ses=b["ses"], beta_school_ses=b["school_mean_ses"],
            sigma2_school=d["sigma2_school"], sigma2_country=d["sigma2_country"],
            school_ids=np.array([s["id"] for s in d["schools"]], dtype=object),
            school_country=np.array([s["country"] for s in d["schools"]], dtype=object),
            school_mean_ses=np.array([s["mean_ses"] for s in d["schools"]], dtype=float),
            school_intercepts=np.array([s["intercept"] for s in d["schools"]], dtype=float),
            country_ids=np.array([c["id"] for c in d["countries"]], dtype=object),
            country_intercepts=np.array([c["intercept"] for c in d["countries"]], dtype=float),
            std_errors=tuple(se.get(k, math.nan) for k in PREDICTORS),
            iterations=conv.get("iterations", 0), final_change=conv.get("final_change", 0.0),
            converged=conv.get("converged", True), score_norm=conv.get("score_norm", 0.0),
        )


class _Design:
    """Sufficient structure for the penalized Newton step.

    Schools and countries are indexed in sorted-id order so that the
    estimates do not depend on row order.
    """

    def __init__(self, y, ses, school, country, school_mean):
        self.y = y
        self.X = np.column_stack([np.ones(len(y)), ses, school_mean[school]])
        self.school = school
        self.country_of_school = country
        self.J = len(school_mean)
        self.K = int(country.max()) + 1
        self.row_country = country[school]

    def eta(self, beta, u, v):
        return self.X @ beta + u[self.school] + v[self.row_country]

    def blocks(self, w, r):
        """Gradient pieces and Z'WZ blocks for weights w and residuals r = y - p."""
        J, K = self.J, self.K
        Xw = self.X * w[:, None]
        g_beta = self.X.T @ r
        g_u = np.bincount(self.school, weights=r, minlength=J)
        g_v = np.bincount(self.country_of_school, weights=g_u, minlength=K)
        XtWX = self.X.T @ Xw
        XtWu = np.column_stack([np.bincount(self.school, weights=Xw[:, c], minlength=J) for c in range(3)])
        w_u = np.bincount(self.school, weights=w, minlength=J)
        XtWv = np.column_stack([np.bincount(self.country_of_school, weights=XtWu[:, c], minlength=K)
                                for c in range(3)])
        w_v = np.bincount(self.country_of_school, weights=w_u, minlength=K)
        return g_beta, g_u, g_v, XtWX, XtWu, w_u, XtWv, w_v


def _loglik(y, eta):
    # sum of y*eta - log(1 + e^eta), stable for large |eta|
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _inner_solve(d: _Design, beta, u, v, s2u, s2v, use_u, use_v, tol=1e-10, max_iter=100):
    """Penalized Newton-Raphson for (beta, u, v) at fixed variances."""
    J, K = d.J, d.K
    prec_u = 1.0 / s2u if use_u else 0.0
    prec_v = 1.0 / s2v if use_v else 0.0

    def objective(b, uu, vv):
        pen = 0.0
        if use_u:
            pen += 0.5 * prec_u * float(uu @ uu)
        if use_v:
            pen += 0.5 * prec_v * float(vv @ vv)
        return _loglik(d.y, d.eta(b, uu, vv)) - pen

    obj = objective(beta, u, v)
    grad_norm = math.inf
    H = None
    for _ in range(max_iter):
        p = expit(d.eta(beta, u, v))
        w = p * (1.0 - p)
        g_beta, g_u, g_v, XtWX, XtWu, w_u, XtWv, w_v = d.blocks(w, d.y - p)
        idx = [np.arange(3)]
        grads = [g_beta]
        size = 3
        if use_u:
            g_u = g_u - prec_u * u
            grads.append(g_u)
            iu = np.arange(size, size + J)
            size += J
        if use_v:
            g_v = g_v - prec_v * v
            grads.append(g_v)
            iv = np.arange(size, size + K)
            size += K
        grad = np.concatenate(grads)
        H = np.zeros((size, size))
        H[:3, :3] = XtWX
        if use_u:
            H[:3, iu] = XtWu.T
            H[iu, :3] = XtWu
            H[iu, iu] = w_u + prec_u
        if use_v:
            H[:3, iv] = XtWv.T
            H[iv, :3] = XtWv
            H[iv, iv] = w_v + prec_v
            if use_u:
                H[iu, iv[d.country_of_school]] = w_u
                H[iv[d.country_of_school], iu] = w_u
        grad_norm = float(np.max(np.abs(grad)))
        if grad_norm < tol:
            break
        try:
            step = linalg.solve(H, grad, assume_a="pos")
        except linalg.LinAlgError:
            step = linalg.lstsq(H, grad)[0]
        t = 1.0
        while True:
            nb = beta + t * step[:3]
            nu = u + t * step[iu] if use_u else u
            nv = v + t * step[iv] if use_v else v
            new = objective(nb, nu, nv)
            if new >= obj - 1e-12 * abs(obj) or t < 1e-10:
                break
            t *= 0.5
        beta, u, v, obj = nb, nu, nv, new
        if float(np.max(np.abs(t * step))) < 1e-14:
            break
    return beta, u, v, H, grad_norm


def _boundary_score(d: _Design, beta, u, v, group, n_groups) -> float:
    """Derivative of the Laplace log-likelihood in a variance component at zero.

    With that level's intercepts removed this is
    ``0.5 * sum_g [(sum_{i in g} r_i)^2 - sum_{i in g} w_i]``.
    """
    p = expit(d.eta(beta, u, v))
    r = d.y - p
    w = p * (1.0 - p)
    rs = np.bincount(group, weights=r, minlength=n_groups)
    ws = np.bincount(group, weights=w, minlength=n_groups)
    return 0.5 * float(np.sum(rs ** 2 - ws))


def _aitken(seq) -> float:
    s0, s1, s2 = seq
    d1, d2 = s1 - s0, s2 - s1
    if d1 == 0 or d1 * d2 <= 0 or abs(d2) >= abs(d1):
        return s2
    r = min(d2 / d1, 0.99)
    return max(s2 + d2 * r / (1 - r), 0.0)


def _check_separation(beta, X):
    for k in (1, 2):
        sd = float(np.std(X[:, k]))
        if sd > 0 and abs(beta[k]) * sd > _SEPARATION_LIMIT:
            raise SeparationError(
                f"coefficient on {PREDICTORS[k]!r} diverges (|beta|*sd = {abs(beta[k]) * sd:.1f}); "
                "the outcome appears completely separated by this predictor"
            )
    if abs(beta[0]) > 50:
        raise SeparationError("intercept diverges; the outcome is (nearly) constant")


def school_means(values, school_ids) -> tuple[np.ndarray, np.ndarray]:
    """Sorted unique school ids and the mean of ``values`` within each school."""
    uniq, codes = np.unique(np.asarray(school_ids).astype(str), return_inverse=True)
    vals = np.asarray(values, dtype=float)
    sums = np.bincount(codes, weights=vals, minlength=len(uniq))
    counts = np.bincount(codes, minlength=len(uniq))
    return uniq.astype(object), sums / counts


def fit_3level_logit(
    y,
    ses,
    school_ids,
    country_ids,
    school_mean_ses: dict | None = None,
    *,
    fix_variances: tuple[float | None, float | None] = (None, None),
    tol: float = 1e-6,
    max_iter: int = 200,
    init_variance: float = 0.5,
) -> MultilevelFit:
    """Fit the three-level random-intercept logit by PQL/Laplace.

    Parameters
    ----------
    y : array of 0/1
        Binary outcome per student.
    ses : array
        Student SES index.
    school_ids, country_ids : arrays
        Group keys per student; every school must sit in one country.
    school_mean_ses : dict, optional
        Contextual SES per school id. Defaults to the mean of ``ses`` over
        the supplied students of each school.
    fix_variances : (s2_school, s2_country)
        Pin either component instead of estimating it; 0 removes the level.
    tol, max_iter : float, int
        Outer loop stops when the relative change of (beta, variances) is
        below ``tol``; hitting ``max_iter`` issues a warning, not an error.

    Returns
    -------
    MultilevelFit
    """
    y = np.asarray(y, dtype=float)
    ses = np.asarray(ses, dtype=float)
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("y must be 0/1")
    if y.min() == y.max():
        raise ValueError("y must contain both classes")
    if not np.all(np.isfinite(ses)):
        raise ValueError("ses must be finite; drop rows with missing SES first")
    sch = np.asarray(school_ids).astype(str)
    cty = np.asarray(country_ids).astype(str)
    if not (len(y) == len(ses) == len(sch) == len(cty)):
        raise ValueError("inputs differ in length")

    school_uniq, school_code = np.unique(sch, return_inverse=True)
    country_uniq, country_code = np.unique(cty, return_inverse=True)
    J, K = len(school_uniq), len(country_uniq)
    if J < 2:
        raise ValueError("need at least two schools")
    school_country = np.full(J, -1)
    for j, k in zip(school_code, country_code):
        if school_country[j] not in (-1, k):
            raise ValueError(f"school {school_uniq[j]!r} appears in two countries")
        school_country[j] = k
    if school_mean_ses is None:
        _, means = school_means(ses, sch)
    else:
        means = np.array([float(school_mean_ses[s]) for s in school_uniq])

    d = _Design(y, ses, school_code, school_country, means)

    fix_u, fix_v = fix_variances
    s2u = init_variance if fix_u is None else float(fix_u)
    s2v = init_variance if fix_v is None else float(fix_v)
    if K == 1 and fix_v is None:
        s2v = 0.0
    estimate_u = fix_u is None
    estimate_v = fix_v is None and K > 1

    rate = y.mean()
    beta = np.array([math.log(rate / (1 - rate)), 0.0, 0.0])
    u, v = np.zeros(J), np.zeros(K)
    converged = False
    change = math.inf
    it = 0
    H = None
    grad_norm = math.inf
    history: list[tuple[float, float]] = []
    for it in range(1, max_iter + 1):
        use_u, use_v = s2u > 0, s2v > 0
        if not use_u:
            u = np.zeros(J)
        if not use_v:
            v = np.zeros(K)
        beta_new, u, v, H, grad_norm = _inner_solve(d, beta, u, v, s2u, s2v, use_u, use_v)
        _check_separation(beta_new, d.X)

        cov = linalg.inv(H)
        pos = 3
        s2u_new, s2v_new = s2u, s2v
        if use_u:
            cu = np.diag(cov)[pos:pos + J]
            pos += J
            if estimate_u:
                s2u_new = float(np.mean(u ** 2 + cu))
        if use_v:
            cv = np.diag(cov)[pos:pos + K]
            if estimate_v:
                s2v_new = float(np.mean(v ** 2 + cv))
        if estimate_u and s2u_new < _VARIANCE_FLOOR:
            s2u_new = 0.0
        if estimate_v and s2v_new < _VARIANCE_FLOOR:
            s2v_new = 0.0
        # EM creeps toward a zero boundary sublinearly; stop there once the
        # variance-component score at zero says the boundary is a maximum
        if estimate_u and 0 < s2u_new < min(s2u, _BOUNDARY_CHECK) \
                and _boundary_score(d, beta_new, np.zeros(J), v, d.school, J) <= 0:
            s2u_new = 0.0
        if estimate_v and 0 < s2v_new < min(s2v, _BOUNDARY_CHECK) \
                and _boundary_score(d, beta_new, u, np.zeros(K), d.row_country, K) <= 0:
            s2v_new = 0.0

        # Aitken extrapolation: EM is linear with ratio near 1 for small variances
        history.append((s2u_new, s2v_new))
        if len(history) == 3:
            s2u_new = _aitken([h[0] for h in history]) if estimate_u else s2u_new
            s2v_new = _aitken([h[1] for h in history]) if estimate_v else s2v_new
            history.clear()

        old = np.r_[beta, s2u, s2v]
        new = np.r_[beta_new, s2u_new, s2v_new]
        # relative change, with a floor so near-zero variances do not stall the test
        change = float(np.max(np.abs(new - old) / np.maximum(np.abs(old), _CHANGE_FLOOR)))
        beta, s2u, s2v = beta_new, s2u_new, s2v_new
        if change < tol:
            converged = True
            break
    # final modes at the final variances, so stationarity holds for the reported values
    use_u, use_v = s2u > 0, s2v > 0
    if not use_u:
        u = np.zeros(J)
    if not use_v:
        v = np.zeros(K)
    beta, u, v, H, grad_norm = _inner_solve(d, beta, u, v, s2u, s2v, use_u, use_v)
    _check_separation(beta, d.X)
    if not converged:
        warnings.warn(
            f"multilevel fit did not converge in {max_iter} outer iterations "
            f"(last relative change {change:.2e}, s2_school={s2u:.4g}, s2_country={s2v:.4g})",
            MultilevelConvergenceWarning,
            stacklevel=2,
        )
    se = np.sqrt(np.diag(linalg.inv(H))[:3])
    return MultilevelFit(
        beta0=float(beta[0]), beta_ses=float(beta[1]), beta_school_ses=float(beta[2]),
        sigma2_school=float(s2u), sigma2_country=float(s2v),
        school_ids=school_uniq.astype(object), school_country=country_uniq[school_country].astype(object),
        school_mean_ses=means, school_intercepts=u,
        country_ids=country_uniq.astype(object), country_intercepts=v,
        std_errors=tuple(float(x) for x in se), iterations=it, final_change=change,
        converged=converged, score_norm=grad_norm,
    )


def penalized_score(fit: MultilevelFit, y, ses, school_ids, country_ids) -> np.ndarray:
    """Gradient of the penalized log-likelihood at the fitted modes (for diagnostics)."""
    y = np.asarray(y, dtype=float)
    sch = np.asarray(school_ids).astype(str)
    cty = np.asarray(country_ids).astype(str)
    j = np.array([fit._school_pos[s] for s in sch])
    k = np.array([fit._country_pos[c] for c in cty])
    eta = fit.beta0 + fit.beta_ses * np.asarray(ses) + fit.beta_school_ses * fit.school_mean_ses[j]
    eta = eta + fit.school_intercepts[j] + fit.country_intercepts[k]
    r = y - expit(eta)
    X = np.column_stack([np.ones(len(y)), ses, fit.school_mean_ses[j]])
    parts = [X.T @ r]
    if fit.sigma2_school > 0:
        parts.append(np.bincount(j, weights=r, minlength=len(fit.school_ids))
                     - fit.school_intercepts / fit.sigma2_school)
    if fit.sigma2_country > 0:
        parts.append(np.bincount(k, weights=r, minlength=len(fit.country_ids))
                     - fit.country_intercepts / fit.sigma2_country)
    return np.concatenate(parts)


def linear_predictor(fit: MultilevelFit, ses, school_id, country_id, school_mean_ses=None) -> float:
    if school_mean_ses is None:
        pos = fit._school_pos.get(school_id)
        school_mean_ses = ses if pos is None else fit.school_mean_ses[pos]
    return (fit.beta0 + fit.beta_ses * ses + fit.beta_school_ses * school_mean_ses
            + fit.school_intercept(school_id) + fit.country_intercept(country_id))


def predict_probability(fit: MultilevelFit, ses, school_id, country_id, school_mean_ses=None) -> float:
    """Inverse-logit of the linear predictor including posterior-mode intercepts.

    Unknown schools and countries get a zero intercept; an unknown school
    with no ``school_mean_ses`` uses the student's own SES as its context.
    """
    return float(expit(linear_predictor(fit, ses, school_id, country_id, school_mean_ses)))


def predict_many(fit: MultilevelFit, ses, school_ids, country_ids) -> np.ndarray:
    ses = np.asarray(ses, dtype=float)
    sch = np.asarray(school_ids).astype(str)
    cty = np.asarray(country_ids).astype(str)
    pos = np.array([fit._school_pos.get(s, -1) for s in sch])
    known = pos >= 0
    ctx = np.where(known, fit.school_mean_ses[np.maximum(pos, 0)], ses)
    u = np.where(known, fit.school_intercepts[np.maximum(pos, 0)], 0.0)
    v = np.array([fit.country_intercept(c) for c in cty])
    return expit(fit.beta0 + fit.beta_ses * ses + fit.beta_school_ses * ctx + u + v)


def intercept_quintiles(fit: MultilevelFit) -> np.ndarray:
    """Quintile label (1..5) of each school's intercept, in ``fit.school_ids`` order."""
    return assign_quintiles(fit.school_intercepts)
