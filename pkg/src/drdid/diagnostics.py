"""Balance, overlap, placebo and influence-function diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bootstrap import BootstrapConfig, BootstrapResult, bootstrap_many
from .errors import DimensionMismatch
from .estimators import ALL_ESTIMATORS, EstimationRequest
from .glm import LogisticFit
from .panel import DesignMatrix, FeatureSpec, PanelDataset, expand_features

INTERCEPT = "(intercept)"
DEFAULT_BINS = 30


@dataclass(frozen=True)
class BalanceReport:
    per_feature: list  # (name, unweighted ASD, weighted ASD)
    max_unweighted: float
    max_weighted: float
    zero_variance: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "per_feature": [{"feature": f, "asd_unweighted": u, "asd_weighted": w}
                            for f, u, w in self.per_feature],
            "max_unweighted": self.max_unweighted,
            "max_weighted": self.max_weighted,
            "zero_variance": list(self.zero_variance),
        }

    def csv_rows(self) -> tuple[list[str], list[list]]:
        return ["feature", "asd_unweighted", "asd_weighted"], [list(r) for r in self.per_feature]


def _group_var(x: np.ndarray) -> float:
    return float(np.var(x, ddof=1)) if x.size > 1 else 0.0


def compute_balance(data: PanelDataset, design, weights) -> BalanceReport:
    """Absolute standardized differences before and after weighting.

    The denominator ``sqrt(s1^2/N1 + s0^2/N0)`` always uses the unweighted
    group variances, so only the numerator changes with the weights.
    A feature with zero variance in both groups gets ASD 0 and is flagged.
    """
    if isinstance(design, DesignMatrix):
        values, names = design.values, design.columns
    else:
        values = np.asarray(design, dtype=float)
        names = tuple(f"x{j}" for j in range(values.shape[1]))
    w = np.asarray(weights, dtype=float)
    if values.shape[0] != data.n or w.shape != (data.n,):
        raise DimensionMismatch("design/weights do not match the dataset")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    t = data.treated == 1
    rows, flagged = [], []
    for j, name in enumerate(names):
        if name == INTERCEPT:
            continue
        x = values[:, j]
        # constancy is checked directly: the variance of a constant may round above 0
        if np.ptp(x[t]) == 0 and np.ptp(x[~t]) == 0:
            flagged.append(name)
            rows.append((name, 0.0, 0.0))
            continue
        denom = math.sqrt(_group_var(x[t]) / t.sum() + _group_var(x[~t]) / (~t).sum())
        unw = abs(x[t].mean() - x[~t].mean()) / denom
        wt = abs(np.average(x[t], weights=w[t]) - np.average(x[~t], weights=w[~t])) / denom
        rows.append((name, float(unw), float(wt)))
    mu = max((r[1] for r in rows), default=0.0)
    mw = max((r[2] for r in rows), default=0.0)
    return BalanceReport(rows, mu, mw, tuple(flagged))


@dataclass(frozen=True)
class OverlapReport:
    histogram_treated: np.ndarray
    histogram_control: np.ndarray
    bin_edges: np.ndarray
    control_ps_max: float
    treated_beyond_control_max: int

    def to_dict(self) -> dict:
        return {
            "bin_edges": self.bin_edges.tolist(),
            "histogram_treated": self.histogram_treated.tolist(),
            "histogram_control": self.histogram_control.tolist(),
            "control_ps_max": self.control_ps_max,
            "treated_beyond_control_max": self.treated_beyond_control_max,
        }

    def csv_rows(self) -> tuple[list[str], list[list]]:
        e = self.bin_edges
        rows = [[float(e[k]), float(e[k + 1]), int(self.histogram_treated[k]), int(self.histogram_control[k])]
                for k in range(len(e) - 1)]
        return ["bin_lower", "bin_upper", "count_treated", "count_control"], rows


def compute_overlap(data: PanelDataset, propensity, bins: int = DEFAULT_BINS) -> OverlapReport:
    """Histogram of estimated propensity scores by group on equal-width bins over [0, 1].

    ``propensity`` is a :class:`LogisticFit` fitted on ``data`` or a vector of scores.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if isinstance(propensity, LogisticFit):
        e = propensity.predict(expand_features(data, propensity.feature_spec))
    else:
        e = np.asarray(propensity, dtype=float)
    if e.shape != (data.n,):
        raise DimensionMismatch("propensity length does not match the dataset")
    edges = np.linspace(0.0, 1.0, bins + 1)
    t = data.treated == 1
    ht, _ = np.histogram(e[t], bins=edges)
    hc, _ = np.histogram(e[~t], bins=edges)
    cmax = float(e[~t].max())
    return OverlapReport(ht, hc, edges, cmax, int(np.sum(e[t] > cmax)))


@dataclass(frozen=True)
class PlaceboResult:
    results: list[BootstrapResult]
    advisory: str  # "PASS" or "WARN"
    failing: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"advisory": self.advisory, "failing": list(self.failing),
                "results": [r.estimate.to_dict() for r in self.results]}


def _covers(ci, value: float) -> bool:
    return ci is not None and ci[0] <= value <= ci[1]


def placebo_evaluation(pre_data: PanelDataset, estimators=ALL_ESTIMATORS,
                       ps_spec: FeatureSpec | None = None, outcome_spec: FeatureSpec | None = None,
                       config: BootstrapConfig = BootstrapConfig()) -> PlaceboResult:
    """Run the estimators on two pre-treatment periods ("no treatment" check).

    The advisory is PASS when every CFD interval covers 0 and every CMF
    interval covers 1, WARN otherwise. It is a heuristic, not a test.
    """
    requests = [EstimationRequest(est, ps_spec, outcome_spec) for est in estimators]
    results = bootstrap_many(pre_data, requests, config)
    failing = tuple(r.point.estimator.value for r in results
                    if not (_covers(r.ci_cfd, 0.0) and _covers(r.ci_cmf, 1.0)))
    return PlaceboResult(results, "WARN" if failing else "PASS", failing)


@dataclass(frozen=True)
class InfluenceDiagnostics:
    var_wt: float
    var_dr: float
    var_difference: float
    scaled_difference: float
    closed_form_difference: float
    closed_form_se: float
    tau: float
    agrees: bool = field(default=True)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def influence_variance_comparison(data: PanelDataset, true_propensity, true_mu, true_nu,
                                  tau: float | None = None, z: float = 3.0) -> InfluenceDiagnostics:
    """Compare influence-function variances of the weighting and DR estimators.

    Uses known nuisance functions. ``tau`` defaults to the weighting estimate
    with the true propensity; it shifts both influence functions equally and
    does not affect the variances. The closed form is the sample mean of
    ``((G-e)/(1-e))^2 (nu-mu)(2 dY - (nu-mu)) / pi^2``; ``agrees`` reports
    whether it is within ``z`` standard errors of the empirical difference.
    """
    e, mu, nu = (np.asarray(a, dtype=float) for a in (true_propensity, true_mu, true_nu))
    if not (e.shape == mu.shape == nu.shape == (data.n,)):
        raise DimensionMismatch("oracle vectors must have one entry per unit")
    g = data.treated.astype(float)
    dy = data.y_after - data.y_before
    pi = data.n_treated / data.n
    r = (g - e) / (1 - e)
    delta = nu - mu
    if tau is None:
        tau = float(np.mean(r * dy) / pi)
    phi_wt = r * dy / pi - tau
    phi_dr = r * (dy - delta) / pi - tau
    var_wt = float(np.var(phi_wt, ddof=1))
    var_dr = float(np.var(phi_dr, ddof=1))
    diff = var_wt - var_dr
    c = r * r * delta * (2 * dy - delta) / pi**2
    closed = float(c.mean())
    se = float(c.std(ddof=1) / math.sqrt(data.n)) if data.n > 1 else math.inf
    ok = abs(diff - closed) <= z * se if se > 0 else diff == closed
    return InfluenceDiagnostics(var_wt, var_dr, diff, diff / data.n, closed, se, tau, bool(ok))


def write_rows_csv(path, header: list[str], rows: list[list]) -> None:
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        out.writerows(rows)
