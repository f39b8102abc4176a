"""Maximum-likelihood fitting of the nuisance models.

Logistic regression for the propensity score, NB2 / Poisson regression for
count outcomes, and ordinary least squares for continuous outcomes.

NB2 parameterisation: mean ``m = exp(X b)``, variance ``m + m**2 / phi``.
``phi`` is an inverse dispersion (``alpha = 1 / phi`` in the other common
convention); ``phi -> inf`` is the Poisson limit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln

from .errors import NonConvergence, SeparationDetected, SingularInformation
from .panel import DesignMatrix, FeatureSpec, PanelDataset, expand_features

PROB_CLAMP = 1e-12
LOGIT_CLAMP = math.log((1 - PROB_CLAMP) / PROB_CLAMP)
DISPERSION_MAX = 1e8
DISPERSION_MIN = 1e-8
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
_LL_SLACK = 1e-12


def _values(design) -> np.ndarray:
    if isinstance(design, DesignMatrix):
        return design.values
    return np.asarray(design, dtype=float)


def _scaled(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Divide each column by its max |value|; raise if rank deficient."""
    s = np.max(np.abs(X), axis=0) if X.shape[0] else np.ones(X.shape[1])
    s = np.where(s > 0, s, 1.0)
    Xs = X / s
    if X.shape[1] == 0 or np.linalg.matrix_rank(Xs) < X.shape[1]:
        raise SingularInformation(f"design of shape {X.shape} is rank deficient")
    return Xs, s


def _solve(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    try:
        step = np.linalg.solve(H, g)
    except np.linalg.LinAlgError as exc:
        raise SingularInformation("information matrix is singular") from exc
    if not np.all(np.isfinite(step)):
        raise SingularInformation("information matrix is singular")
    return step


def _accept(new: float, old: float) -> bool:
    return new >= old - _LL_SLACK * (1.0 + abs(old))


# ---------------------------------------------------------------- logistic

def logistic_loglik(coef, design, labels) -> float:
    eta = _values(design) @ np.asarray(coef, dtype=float)
    y = np.asarray(labels, dtype=float)
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def logistic_score(coef, design, labels) -> np.ndarray:
    X = _values(design)
    p = expit(X @ np.asarray(coef, dtype=float))
    return X.T @ (np.asarray(labels, dtype=float) - p)


@dataclass(frozen=True, eq=False)
class LogisticFit:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    log_likelihood: float
    score_norm: float
    feature_spec: FeatureSpec | None = None
    separation: bool = False
    loglik_path: tuple[float, ...] = ()

    def predict(self, design) -> np.ndarray:
        """Fitted probabilities, clamped to [1e-12, 1 - 1e-12]."""
        p = expit(_values(design) @ self.coefficients)
        return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)

    def summary(self) -> dict:
        return {
            "coefficients": self.coefficients.tolist(),
            "converged": self.converged,
            "iterations": self.iterations,
            "log_likelihood": self.log_likelihood,
            "separation": self.separation,
        }


def fit_logistic(design, labels, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                 start=None, feature_spec: FeatureSpec | None = None) -> LogisticFit:
    """Logistic MLE by Newton-Raphson (IRLS) with step halving.

    Convergence is judged on the score of the column-scaled design. A fit
    whose linear predictor runs past the probability clamp is flagged as
    separated, warned about, and returned with ``converged=False``.
    """
    X = _values(design)
    y = np.asarray(labels, dtype=float)
    if X.shape[0] != y.shape[0]:
        raise ValueError("design rows and label length differ")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    if y.min() == y.max():
        raise ValueError("labels contain a single class")
    if X.shape[1] >= X.shape[0]:
        raise SingularInformation("more columns than observations")
    if feature_spec is None and isinstance(design, DesignMatrix):
        feature_spec = design.spec
    Xs, s = _scaled(X)
    b = np.zeros(X.shape[1]) if start is None else np.asarray(start, dtype=float) * s

    eta = Xs @ b
    ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    path = [ll]
    converged = separation = False
    norm = math.inf
    it = 0
    while True:
        p = expit(eta)
        score = Xs.T @ (y - p)
        norm = float(np.sqrt(score @ score))
        if np.max(np.abs(eta)) > LOGIT_CLAMP:
            separation = True
            break
        w = p * (1.0 - p)
        H = Xs.T @ (Xs * w[:, None])
        try:
            step = _solve(H, score)
        except SingularInformation:
            if np.max(np.abs(eta)) > 0.5 * LOGIT_CLAMP:
                separation = True
                break
            raise
        # a vanishing score with O(1) Newton steps means coefficients diverge
        if norm < tol and np.max(np.abs(step)) < 1e-4:
            # the pending step is inside the quadratic region; take it to reach working precision
            b = b + step
            eta = Xs @ b
            ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
            score = Xs.T @ (y - expit(eta))
            norm = float(np.sqrt(score @ score))
            converged = True
            break
        if it >= max_iter:
            break
        it += 1
        t = 1.0
        while True:
            b_new = b + t * step
            eta_new = Xs @ b_new
            ll_new = float(np.sum(y * eta_new - np.logaddexp(0.0, eta_new)))
            if _accept(ll_new, ll):
                break
            t *= 0.5
            if t < 1e-10:
                b_new, eta_new, ll_new = b, eta, ll
                break
        if b_new is b:
            converged = norm < tol
            break
        b, eta, ll = b_new, eta_new, ll_new
        path.append(ll)

    if separation:
        converged = False
        warnings.warn("logistic fit: probabilities pinned at the clamp (separation)",
                      SeparationDetected, stacklevel=2)
    return LogisticFit(b / s, converged, it, ll, norm, feature_spec, separation, tuple(path))


# ---------------------------------------------------------- negative binomial

def _count_tail(y: np.ndarray) -> np.ndarray:
    """``tail[k]`` = number of units with count > k, for k < max count."""
    yi = np.rint(y).astype(np.int64)
    if yi.size == 0 or yi.max() == 0:
        return np.zeros(0)
    return (yi.size - np.cumsum(np.bincount(yi)))[:-1].astype(float)


def _check_counts(y: np.ndarray) -> None:
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise ValueError("counts must be non-negative integers")


def _nb_terms(eta, y, phi, tail):
    """Log-likelihood without the ``-lgamma(y+1)`` constant, plus derivatives in phi."""
    m = np.exp(eta)
    if math.isinf(phi):
        return float(np.sum(y * eta - m)), 0.0, 0.0, m
    k = phi + np.arange(tail.size)
    lg = float(tail @ np.log(k))
    dg = float(tail @ (1.0 / k))
    tg = -float(tail @ (1.0 / (k * k)))
    r = m / phi
    l1p = np.log1p(r)
    pm = phi + m
    ll = lg + float(np.sum(-(phi + y) * l1p + y * eta - y * math.log(phi)))
    d1 = dg + float(np.sum(-l1p + (m - y) / pm))
    d2 = tg + float(np.sum(m / (phi * pm) - (m - y) / (pm * pm)))
    return ll, d1, d2, m


def negbin_loglik(coef, dispersion, design, counts) -> float:
    """Full NB2 log-likelihood (Poisson when ``dispersion`` is inf)."""
    y = np.asarray(counts, dtype=float)
    _check_counts(y)
    eta = _values(design) @ np.asarray(coef, dtype=float)
    ll, _, _, _ = _nb_terms(eta, y, float(dispersion), _count_tail(y))
    return ll - float(np.sum(gammaln(y + 1.0)))


def negbin_score(coef, dispersion, design, counts) -> tuple[np.ndarray, float]:
    """Gradient of :func:`negbin_loglik` in (coefficients, dispersion)."""
    X = _values(design)
    y = np.asarray(counts, dtype=float)
    eta = X @ np.asarray(coef, dtype=float)
    phi = float(dispersion)
    _, d1, _, m = _nb_terms(eta, y, phi, _count_tail(y))
    if math.isinf(phi):
        return X.T @ (y - m), 0.0
    return X.T @ ((y - m) * phi / (phi + m)), d1


@dataclass(frozen=True, eq=False)
class NegBinFit:
    coefficients: np.ndarray
    dispersion: float
    converged: bool
    iterations: int
    log_likelihood: float
    family: str
    score_norm: float
    feature_spec: FeatureSpec | None = None
    degraded_to_poisson: bool = False
    loglik_path: tuple[float, ...] = ()

    def predict(self, design) -> np.ndarray:
        return np.exp(_values(design) @ self.coefficients)

    def summary(self) -> dict:
        return {
            "coefficients": self.coefficients.tolist(),
            "dispersion": None if math.isinf(self.dispersion) else self.dispersion,
            "family": self.family,
            "converged": self.converged,
            "iterations": self.iterations,
            "log_likelihood": self.log_likelihood,
            "degraded_to_poisson": self.degraded_to_poisson,
        }


def fit_negbin(design, counts, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
               dispersion: float | None = None, start=None, start_dispersion: float | None = None,
               feature_spec: FeatureSpec | None = None) -> NegBinFit:
    """Joint NB2 MLE of coefficients and dispersion.

    Each sweep takes one Newton step (observed information, step halving) on
    the coefficients and one safeguarded Newton step on ``log(phi)``. If the
    profile likelihood keeps rising at ``phi = 1e8`` the model is refitted as
    Poisson and flagged. Passing ``dispersion`` fixes it (``np.inf`` gives
    Poisson regression).

    Convergence: coefficient score on the column-scaled design and the
    ``log(phi)`` score both below ``tol``.
    """
    X = _values(design)
    y = np.asarray(counts, dtype=float)
    if X.shape[0] != y.shape[0]:
        raise ValueError("design rows and count length differ")
    _check_counts(y)
    if feature_spec is None and isinstance(design, DesignMatrix):
        feature_spec = design.spec
    if y.sum() == 0:
        raise SingularInformation("all counts are zero; no finite MLE")
    Xs, s = _scaled(X)
    tail = _count_tail(y)
    const = float(np.sum(gammaln(y + 1.0)))
    fixed = dispersion is not None

    if start is not None:
        b = np.asarray(start, dtype=float) * s
    else:
        b = np.linalg.lstsq(Xs, np.full(len(y), math.log(y.mean())), rcond=None)[0]
    if fixed:
        phi = float(dispersion)
    elif start_dispersion is not None and math.isfinite(start_dispersion):
        phi = min(max(float(start_dispersion), DISPERSION_MIN), DISPERSION_MAX)
    else:
        phi = 1.0

    eta = Xs @ b
    ll, d1, d2, m = _nb_terms(eta, y, phi, tail)
    path = [ll - const]
    converged = False
    it = 0
    gnorm = gphi = math.inf
    while True:
        if math.isinf(phi):
            score = Xs.T @ (y - m)
            w = m
        else:
            score = Xs.T @ ((y - m) * phi / (phi + m))
            w = m * phi * (phi + y) / (phi + m) ** 2
        gnorm = float(np.sqrt(score @ score))
        gphi = 0.0 if fixed else phi * d1
        capped = not fixed and phi >= DISPERSION_MAX and gphi > 0
        if gnorm < tol and (abs(gphi) < tol or capped):
            converged = True
            break
        if it >= max_iter:
            break
        it += 1

        # coefficient step
        step = _solve(Xs.T @ (Xs * w[:, None]), score)
        t = 1.0
        while t >= 1e-10:
            b_new = b + t * step
            eta_new = Xs @ b_new
            if np.max(eta_new) < 700:
                out = _nb_terms(eta_new, y, phi, tail)
                if _accept(out[0], ll):
                    b, eta = b_new, eta_new
                    ll, d1, d2, m = out
                    break
            t *= 0.5
        path.append(ll - const)

        if fixed:
            continue
        # dispersion step on theta = log(phi)
        theta = math.log(phi)
        g = phi * d1
        h = phi * phi * d2 + phi * d1
        delta = -g / h if h < 0 else math.copysign(1.0, g)
        delta = max(-3.0, min(3.0, delta))
        theta_max = math.log(DISPERSION_MAX)
        theta_min = math.log(DISPERSION_MIN)
        while abs(delta) > 1e-12:
            th = min(max(theta + delta, theta_min), theta_max)
            out = _nb_terms(eta, y, math.exp(th), tail)
            if _accept(out[0], ll):
                phi = math.exp(th)
                ll, d1, d2, m = out
                break
            delta *= 0.5
        path.append(ll - const)

    degraded = False
    if not fixed and phi >= DISPERSION_MAX * (1 - 1e-12) and phi * d1 > 0:
        # likelihood still increasing at the cap: Poisson limit
        pois = fit_negbin(design, counts, tol=tol, max_iter=max_iter, dispersion=math.inf,
                          start=b / s, feature_spec=feature_spec)
        return NegBinFit(pois.coefficients, math.inf, pois.converged, it + pois.iterations,
                         pois.log_likelihood, "poisson", pois.score_norm, feature_spec, True,
                         tuple(path) + pois.loglik_path)
    if not converged:
        warnings.warn(f"negative binomial fit did not converge in {max_iter} iterations",
                      NonConvergence, stacklevel=2)
    family = "poisson" if math.isinf(phi) else "negbin"
    return NegBinFit(b / s, phi, converged, it, ll - const, family, max(gnorm, abs(gphi)),
                     feature_spec, degraded, tuple(path))


def fit_poisson(design, counts, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                start=None, feature_spec: FeatureSpec | None = None) -> NegBinFit:
    return fit_negbin(design, counts, tol, max_iter, dispersion=math.inf, start=start,
                      feature_spec=feature_spec)


# ---------------------------------------------------------------- gaussian

@dataclass(frozen=True, eq=False)
class LinearFit:
    """Least-squares mean model for continuous outcomes."""

    coefficients: np.ndarray
    residual_variance: float
    feature_spec: FeatureSpec | None = None
    converged: bool = True
    family: str = "gaussian"

    def predict(self, design) -> np.ndarray:
        return _values(design) @ self.coefficients

    def summary(self) -> dict:
        return {"coefficients": self.coefficients.tolist(), "family": self.family,
                "residual_variance": self.residual_variance}


def fit_gaussian(design, y, feature_spec: FeatureSpec | None = None, **_) -> LinearFit:
    X = _values(design)
    y = np.asarray(y, dtype=float)
    if feature_spec is None and isinstance(design, DesignMatrix):
        feature_spec = design.spec
    Xs, s = _scaled(X)
    b = np.linalg.lstsq(Xs, y, rcond=None)[0]
    resid = y - Xs @ b
    dof = max(len(y) - X.shape[1], 1)
    return LinearFit(b / s, float(resid @ resid / dof), feature_spec)


# ------------------------------------------------------ power-order selection

def cv_power_order_scores(data: PanelDataset, base_spec: FeatureSpec, orders=range(1, 6),
                          cv: str | int = "auto", tol: float = DEFAULT_TOL,
                          max_iter: int = DEFAULT_MAX_ITER) -> dict[int, float | None]:
    """Cross-validated MSE of predicted propensity vs. treatment label per order.

    ``cv`` is ``"loocv"``, an integer fold count, or ``"auto"`` (LOOCV up to
    5000 units, 10-fold above). Folds are assigned as ``i mod k``. Orders
    where any fold fit separates or is singular score ``None``.
    """
    n = data.n
    if cv == "auto":
        cv = "loocv" if n <= 5000 else 10
    k = n if cv == "loocv" else int(cv)
    if not 2 <= k <= n:
        raise ValueError(f"invalid fold count {k}")
    folds = np.arange(n) % k
    y = data.treated.astype(float)
    scores: dict[int, float | None] = {}
    for order in orders:
        spec = base_spec.with_power_order(order)
        X = expand_features(data, spec).values
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                full = fit_logistic(X, y, tol, max_iter)
            if full.separation:
                scores[order] = None
                continue
            sse = 0.0
            for f in range(k):
                test = folds == f
                train = ~test
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    fit = fit_logistic(X[train], y[train], tol, max_iter, start=full.coefficients)
                if fit.separation:
                    raise SingularInformation("separation in fold")
                p = fit.predict(X[test])
                sse += float(np.sum((y[test] - p) ** 2))
            scores[order] = sse / n
        except (SingularInformation, ValueError):
            scores[order] = None
    return scores


def select_power_order(data: PanelDataset, base_spec: FeatureSpec, orders=range(1, 6),
                       cv: str | int = "auto", tol: float = DEFAULT_TOL,
                       max_iter: int = DEFAULT_MAX_ITER) -> FeatureSpec:
    """Return ``base_spec`` with the CV-optimal shared power order (ties -> smaller)."""
    orders = sorted(set(orders))
    if not orders or orders[0] < 1 or orders[-1] > 5:
        raise ValueError("orders must lie in [1, 5]")
    if len(orders) == 1:
        return base_spec.with_power_order(orders[0])
    scores = cv_power_order_scores(data, base_spec, orders, cv, tol, max_iter)
    eligible = [(v, l) for l, v in scores.items() if v is not None]
    if not eligible:
        raise SingularInformation("no eligible power order: every candidate failed")
    best = min(eligible)[1]
    return base_spec.with_power_order(best)
