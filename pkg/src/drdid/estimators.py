"""DID estimators of the counterfactual treated mean and the CFD/CMF effects.

All four estimators share ``theta1 = mean(Y_t+1 | G=1)`` and differ in how
``theta0 = E[Y_t+1(0) | G=1]`` is estimated:

* ``direct``: treated before-mean plus raw control trend;
* ``regression``: treated before-mean plus predicted control trend at the
  treated covariates (outcome models fitted on controls only);
* ``weighting``: ATT-weighted control trend (w = e / (1 - e));
* ``double_robust``: weighting augmented with the outcome models.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DrdidError, MissingNuisance
from .glm import LinearFit, LogisticFit, NegBinFit, fit_gaussian, fit_logistic, fit_negbin
from .panel import FeatureSpec, PanelDataset, expand_features

EXTREME_WEIGHT_THRESHOLD = 50.0
# failures recorded per request rather than raised
FIT_ERRORS = (DrdidError, ValueError, np.linalg.LinAlgError, FloatingPointError)


class Estimator(str, Enum):
    DIRECT = "direct"
    REGRESSION = "regression"
    WEIGHTING = "weighting"
    DOUBLE_ROBUST = "double_robust"

    @property
    def needs_propensity(self) -> bool:
        return self in (Estimator.WEIGHTING, Estimator.DOUBLE_ROBUST)

    @property
    def needs_outcome(self) -> bool:
        return self in (Estimator.REGRESSION, Estimator.DOUBLE_ROBUST)


ALL_ESTIMATORS = tuple(Estimator)


@dataclass(frozen=True, eq=False)
class NuisanceBundle:
    """Fitted nuisance models and their predictions on every unit."""

    weights: np.ndarray
    propensity: LogisticFit | None = None
    outcome_before: NegBinFit | LinearFit | None = None
    outcome_after: NegBinFit | LinearFit | None = None
    e_hat: np.ndarray | None = None
    mu_hat: np.ndarray | None = None
    nu_hat: np.ndarray | None = None

    @property
    def has_propensity(self) -> bool:
        return self.e_hat is not None

    @property
    def has_outcome(self) -> bool:
        return self.mu_hat is not None and self.nu_hat is not None


def att_weights(treated: np.ndarray, e_hat: np.ndarray) -> np.ndarray:
    return np.where(treated == 1, 1.0, e_hat / (1.0 - e_hat))


def bundle_from_arrays(data: PanelDataset, e_hat=None, mu_hat=None, nu_hat=None) -> NuisanceBundle:
    """Bundle from supplied prediction vectors (oracle or external fits)."""
    e = None if e_hat is None else np.asarray(e_hat, dtype=float)
    w = np.ones(data.n) if e is None else att_weights(data.treated, e)
    return NuisanceBundle(
        weights=w, e_hat=e,
        mu_hat=None if mu_hat is None else np.asarray(mu_hat, dtype=float),
        nu_hat=None if nu_hat is None else np.asarray(nu_hat, dtype=float),
    )


def fit_nuisance(data: PanelDataset, ps_spec: FeatureSpec | None = None,
                 outcome_spec: FeatureSpec | None = None, start: NuisanceBundle | None = None,
                 outcome_spec_after: FeatureSpec | None = None) -> NuisanceBundle:
    """Fit the propensity model on all units and the two outcome models on controls.

    ``start`` supplies warm-start coefficients (used by the bootstrap).
    Count outcomes use NB2; continuous outcomes use least squares.
    """
    e_hat = prop = None
    if ps_spec is not None:
        X = expand_features(data, ps_spec)
        s = start.propensity.coefficients if start is not None and start.propensity else None
        prop = fit_logistic(X, data.treated, start=s, feature_spec=ps_spec)
        e_hat = prop.predict(X)
    mu_hat = nu_hat = fit_b = fit_a = None
    if outcome_spec is not None:
        spec_after = outcome_spec_after or outcome_spec
        ctrl = data.treated == 0
        Xb = expand_features(data, outcome_spec).values
        Xa = Xb if spec_after == outcome_spec else expand_features(data, spec_after).values
        if data.outcome_family == "count":
            sb = start.outcome_before if start is not None else None
            sa = start.outcome_after if start is not None else None
            fit_b = fit_negbin(Xb[ctrl], data.y_before[ctrl], feature_spec=outcome_spec,
                               start=None if sb is None else sb.coefficients,
                               start_dispersion=None if sb is None else sb.dispersion)
            fit_a = fit_negbin(Xa[ctrl], data.y_after[ctrl], feature_spec=spec_after,
                               start=None if sa is None else sa.coefficients,
                               start_dispersion=None if sa is None else sa.dispersion)
        else:
            fit_b = fit_gaussian(Xb[ctrl], data.y_before[ctrl], feature_spec=outcome_spec)
            fit_a = fit_gaussian(Xa[ctrl], data.y_after[ctrl], feature_spec=spec_after)
        mu_hat = fit_b.predict(Xb)
        nu_hat = fit_a.predict(Xa)
    w = np.ones(data.n) if e_hat is None else att_weights(data.treated, e_hat)
    return NuisanceBundle(w, prop, fit_b, fit_a, e_hat, mu_hat, nu_hat)


@dataclass(frozen=True)
class EffectEstimate:
    estimator: Estimator
    theta1: float
    theta0: float
    cfd: float
    cmf: float
    cmf_defined: bool
    ci_cfd: tuple[float, float] | None = None
    ci_cmf: tuple[float, float] | None = None
    warnings: tuple[str, ...] = field(default=())

    @classmethod
    def from_thetas(cls, estimator, theta1: float, theta0: float,
                    warnings: tuple[str, ...] = ()) -> "EffectEstimate":
        defined = theta0 > 0
        return cls(Estimator(estimator), theta1, theta0, theta1 - theta0,
                   theta1 / theta0 if defined else math.nan, defined, warnings=warnings)

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator.value,
            "theta1": self.theta1,
            "theta0": self.theta0,
            "cfd": self.cfd,
            "cmf": self.cmf if self.cmf_defined else None,
            "cmf_defined": self.cmf_defined,
            "ci_cfd": list(self.ci_cfd) if self.ci_cfd else None,
            "ci_cmf": list(self.ci_cmf) if self.ci_cmf else None,
            "warnings": list(self.warnings),
        }


def estimate_theta1(data: PanelDataset) -> float:
    g = data.treated == 1
    return float(data.y_after[g].sum() / g.sum())


def _treated_before_mean(data: PanelDataset) -> float:
    g = data.treated == 1
    return float(data.y_before[g].sum() / g.sum())


def estimate_theta0_direct(data: PanelDataset) -> float:
    c = data.treated == 0
    trend = (data.y_after[c] - data.y_before[c]).sum() / c.sum()
    return _treated_before_mean(data) + float(trend)


def estimate_theta0_regression(data: PanelDataset, nuisance: NuisanceBundle) -> float:
    if not nuisance.has_outcome:
        raise MissingNuisance("regression estimator needs both outcome models")
    g = data.treated == 1
    pred = (nuisance.nu_hat[g] - nuisance.mu_hat[g]).sum() / g.sum()
    return _treated_before_mean(data) + float(pred)


def estimate_theta0_weighting(data: PanelDataset, nuisance: NuisanceBundle) -> float:
    if not nuisance.has_propensity:
        raise MissingNuisance("weighting estimator needs a propensity model")
    g = data.treated
    w = nuisance.weights
    n1 = g.sum()
    dy = data.y_after - data.y_before
    return float(((g * data.y_before * w).sum() + ((1 - g) * dy * w).sum()) / n1)


def _dr_weighting_augmented(data: PanelDataset, nuisance: NuisanceBundle) -> float:
    g = data.treated
    e = nuisance.e_hat
    aug = ((g - e) * (nuisance.nu_hat - nuisance.mu_hat) / (1.0 - e)).sum() / g.sum()
    return estimate_theta0_weighting(data, nuisance) + float(aug)


def _dr_regression_augmented(data: PanelDataset, nuisance: NuisanceBundle) -> float:
    g = data.treated
    r_after = data.y_after - nuisance.nu_hat
    r_before = data.y_before - nuisance.mu_hat
    aug = ((1 - g) * (r_after - r_before) * nuisance.weights).sum() / g.sum()
    return estimate_theta0_regression(data, nuisance) + float(aug)


def estimate_theta0_dr(data: PanelDataset, nuisance: NuisanceBundle,
                       form: str = "weighting_augmented") -> float:
    """Double-robust estimate; the two algebraically identical forms are selectable."""
    if not (nuisance.has_propensity and nuisance.has_outcome):
        raise MissingNuisance("double-robust estimator needs propensity and outcome models")
    if form == "weighting_augmented":
        return _dr_weighting_augmented(data, nuisance)
    if form == "regression_augmented":
        return _dr_regression_augmented(data, nuisance)
    raise ValueError(f"unknown form {form!r}")


def _theta0(data: PanelDataset, estimator: Estimator, nuisance: NuisanceBundle | None) -> float:
    if estimator is Estimator.DIRECT:
        return estimate_theta0_direct(data)
    if nuisance is None:
        raise MissingNuisance(f"{estimator.value} estimator needs nuisance fits")
    if estimator is Estimator.REGRESSION:
        return estimate_theta0_regression(data, nuisance)
    if estimator is Estimator.WEIGHTING:
        return estimate_theta0_weighting(data, nuisance)
    theta0 = estimate_theta0_dr(data, nuisance, "weighting_augmented")
    if __debug__:
        alt = estimate_theta0_dr(data, nuisance, "regression_augmented")
        assert abs(theta0 - alt) <= 1e-8 * (1 + abs(theta0)), (theta0, alt)
    return theta0


def estimate_effect(data: PanelDataset, estimator, nuisance: NuisanceBundle | None = None,
                    weight_threshold: float = EXTREME_WEIGHT_THRESHOLD) -> EffectEstimate:
    estimator = Estimator(estimator)
    theta1 = estimate_theta1(data)
    theta0 = _theta0(data, estimator, nuisance)
    notes = []
    if estimator.needs_propensity:
        wmax = float(nuisance.weights[data.treated == 0].max())
        if wmax > weight_threshold:
            notes.append(f"ExtremeWeights: max control weight {wmax:.3g} > {weight_threshold:g}")
    if theta0 <= 0:
        notes.append(f"NegativeTheta0: theta0={theta0:.6g}; CMF undefined")
    return EffectEstimate.from_thetas(estimator, theta1, theta0, tuple(notes))


def extrapolation_share(data: PanelDataset, e_hat: np.ndarray) -> float:
    """Share of treated units whose propensity exceeds the control maximum."""
    g = data.treated == 1
    return float(np.mean(e_hat[g] > e_hat[~g].max()))


@dataclass(frozen=True)
class EstimationRequest:
    """One estimator with its nuisance specifications."""

    estimator: Estimator
    ps_spec: FeatureSpec | None = None
    outcome_spec: FeatureSpec | None = None

    def __post_init__(self):
        est = Estimator(self.estimator)
        object.__setattr__(self, "estimator", est)
        if est.needs_propensity and self.ps_spec is None:
            raise MissingNuisance(f"{est.value} requires a propensity specification")
        if est.needs_outcome and self.outcome_spec is None:
            raise MissingNuisance(f"{est.value} requires an outcome specification")
        if not est.needs_propensity:
            object.__setattr__(self, "ps_spec", None)
        if not est.needs_outcome:
            object.__setattr__(self, "outcome_spec", None)


def estimate_requests(data: PanelDataset, requests, starts: dict | None = None,
                      quiet: bool = False) -> tuple[list, dict]:
    """Evaluate several requests on one dataset, fitting each distinct model once.

    Returns ``(results, fits)``: ``results[i]`` is an :class:`EffectEstimate`
    or the exception raised for request ``i``; ``fits`` maps specs to fitted
    bundles (usable as ``starts`` for the next call).
    """
    starts = starts or {}
    ps_fits: dict = {}
    out_fits: dict = {}
    results: list = []
    with warnings.catch_warnings():
        if quiet:
            warnings.simplefilter("ignore")
        for req in requests:
            try:
                ps = out = None
                if req.ps_spec is not None:
                    key = ("ps", req.ps_spec)
                    if key not in ps_fits:
                        try:
                            ps_fits[key] = fit_nuisance(data, ps_spec=req.ps_spec, start=starts.get(key))
                        except FIT_ERRORS as exc:
                            ps_fits[key] = exc
                    ps = ps_fits[key]
                    if isinstance(ps, Exception):
                        raise ps
                if req.outcome_spec is not None:
                    key = ("out", req.outcome_spec)
                    if key not in out_fits:
                        try:
                            out_fits[key] = fit_nuisance(data, outcome_spec=req.outcome_spec,
                                                         start=starts.get(key))
                        except FIT_ERRORS as exc:
                            out_fits[key] = exc
                    out = out_fits[key]
                    if isinstance(out, Exception):
                        raise out
                bundle = None
                if ps is not None or out is not None:
                    bundle = NuisanceBundle(
                        weights=ps.weights if ps is not None else np.ones(data.n),
                        propensity=ps.propensity if ps is not None else None,
                        outcome_before=out.outcome_before if out is not None else None,
                        outcome_after=out.outcome_after if out is not None else None,
                        e_hat=ps.e_hat if ps is not None else None,
                        mu_hat=out.mu_hat if out is not None else None,
                        nu_hat=out.nu_hat if out is not None else None,
                    )
                results.append(estimate_effect(data, req.estimator, bundle))
            except FIT_ERRORS as exc:
                results.append(exc)
    fits = {k: v for k, v in {**ps_fits, **out_fits}.items() if not isinstance(v, Exception)}
    return results, fits
