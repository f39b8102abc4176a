import math
import warnings

import numpy as np
import pytest
from scipy import optimize, stats

from drdid.errors import SeparationDetected, SingularInformation
from drdid.glm import (fit_logistic, fit_negbin, fit_poisson, logistic_loglik, logistic_score,
                       negbin_loglik, negbin_score, select_power_order, cv_power_order_scores)
from drdid.panel import FeatureSpec, PanelDataset, expand_features
from drdid.simulation import DgpParams, generate_replicate, true_functions
from drdid.streams import substream


def _central(f, x, h):
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _design(rng, n, q):
    return np.column_stack([np.ones(n), rng.normal(size=(n, q - 1))])


def _rel_close(a, b, rtol):
    a, b = np.atleast_1d(a), np.atleast_1d(b)
    return np.all(np.abs(a - b) <= rtol * np.maximum(1.0, np.abs(b)))


def test_logistic_score_matches_finite_differences(rng):
    X = _design(rng, 200, 4)
    y = (rng.random(200) < 0.4).astype(float)
    for _ in range(5):
        b = rng.normal(scale=0.5, size=4)
        fd = _central(lambda c: logistic_loglik(c, X, y), b, 1e-5)
        assert _rel_close(logistic_score(b, X, y), fd, 1e-6)


def test_negbin_score_matches_finite_differences(rng):
    X = _design(rng, 300, 3)
    y = rng.poisson(np.exp(0.2 + 0.3 * X[:, 1]) * rng.gamma(2.0, 0.5, 300)).astype(float)
    for _ in range(5):
        b = rng.normal(scale=0.3, size=3)
        phi = float(rng.uniform(0.5, 5.0))
        gb, gphi = negbin_score(b, phi, X, y)
        fd_b = _central(lambda c: negbin_loglik(c, phi, X, y), b, 1e-5)
        fd_phi = (negbin_loglik(b, phi + 1e-5, X, y) - negbin_loglik(b, phi - 1e-5, X, y)) / 2e-5
        assert _rel_close(gb, fd_b, 1e-6)
        assert _rel_close(gphi, fd_phi, 1e-6)


def test_negbin_loglik_matches_scipy(rng):
    X = _design(rng, 100, 2)
    y = rng.poisson(2.0, 100).astype(float)
    b, phi = np.array([0.5, -0.1]), 1.7
    m = np.exp(X @ b)
    ref = stats.nbinom.logpmf(y, phi, phi / (phi + m)).sum()
    assert negbin_loglik(b, phi, X, y) == pytest.approx(ref, rel=1e-12)
    assert negbin_loglik(b, math.inf, X, y) == pytest.approx(stats.poisson.logpmf(y, m).sum(), rel=1e-12)


def test_intercept_only_logistic_is_prevalence():
    y = np.r_[np.ones(331), np.zeros(1655)]
    fit = fit_logistic(np.ones((1986, 1)), y)
    assert fit.converged
    assert np.allclose(fit.predict(np.ones((3, 1))), 331 / 1986, atol=1e-12)


def test_symmetric_balanced_logistic_has_zero_intercept():
    X = np.column_stack([np.ones(8), [1, 1, -1, -1, 1, 1, -1, -1]])
    y = np.array([1, 0, 1, 0, 1, 1, 0, 0], dtype=float)
    fit = fit_logistic(X, y)
    assert abs(fit.coefficients[0]) < 1e-10


def test_logistic_score_identity_and_monotone_path(rng):
    X = _design(rng, 500, 3)
    y = (rng.random(500) < 1 / (1 + np.exp(-(0.3 + X[:, 1])))).astype(float)
    fit = fit_logistic(X, y)
    assert fit.converged
    assert np.max(np.abs(X.T @ (y - fit.predict(X)))) < 1e-8
    assert np.all(np.diff(fit.loglik_path) >= -1e-9)


def test_logistic_matches_generic_optimizer_on_dgp():
    smp = generate_replicate(DgpParams(), 2000, substream(99, 1))
    X = expand_features(smp.data, FeatureSpec(base_columns=("x1",), power_orders={"x2": 2})).values
    y = smp.data.treated.astype(float)
    fit = fit_logistic(X, y)
    nll = lambda c: -np.sum(y * (X @ c) - np.logaddexp(0, X @ c))  # noqa: E731
    ref = optimize.minimize(nll, np.zeros(4), method="BFGS", options={"gtol": 1e-10}).x
    assert np.allclose(fit.coefficients, ref, atol=1e-4)
    p = fit.predict(X)
    se = np.sqrt(np.diag(np.linalg.inv(X.T @ (X * (p * (1 - p))[:, None]))))
    assert np.all(np.abs(fit.coefficients - np.array(DgpParams().ps_coefs)) < 3 * se)


def test_negbin_dispersion_matches_optimizer_and_truth():
    smp = generate_replicate(DgpParams(), 6000, substream(99, 2))
    d = smp.data
    ctrl = d.treated == 0
    X = expand_features(d, FeatureSpec(base_columns=("x1",), power_orders={"x2": 2})).values[ctrl]
    y = d.y_before[ctrl]
    fit = fit_negbin(X, y)
    assert fit.converged and fit.family == "negbin"

    def nll(v):
        m, phi = np.exp(X @ v[:-1]), math.exp(v[-1])
        return -stats.nbinom.logpmf(y, phi, phi / (phi + m)).sum()

    ref = optimize.minimize(nll, np.r_[np.zeros(4), 0.0], method="BFGS", options={"gtol": 1e-8}).x
    assert np.allclose(fit.coefficients, ref[:-1], atol=1e-3)
    assert math.log(fit.dispersion) == pytest.approx(ref[-1], abs=1e-3)
    # 3 SE band for phi from the curvature of the profile log-likelihood in phi
    h = 1e-3 * fit.dispersion
    prof = lambda p: -optimize.minimize(  # noqa: E731
        lambda b: -negbin_loglik(b, p, X, y), fit.coefficients, method="BFGS").fun
    curv = (prof(fit.dispersion + h) - 2 * prof(fit.dispersion) + prof(fit.dispersion - h)) / h**2
    se = 1 / math.sqrt(-curv)
    assert abs(fit.dispersion - 2.5) < 3 * se


def test_negbin_fixed_large_dispersion_equals_poisson(rng):
    X = _design(rng, 400, 3)
    y = rng.poisson(np.exp(0.1 + 0.4 * X[:, 1])).astype(float)
    pois = fit_poisson(X, y)
    nb = fit_negbin(X, y, dispersion=1e8)
    assert pois.family == "poisson"
    assert np.max(np.abs(nb.coefficients - pois.coefficients)) < 1e-6
    assert np.max(np.abs(X.T @ (y - pois.predict(X)))) < 1e-6


def test_constant_counts_degrade_to_poisson():
    fit = fit_negbin(np.ones((50, 1)), np.full(50, 3.0))
    assert fit.family == "poisson" and fit.degraded_to_poisson
    assert fit.coefficients[0] == pytest.approx(math.log(3.0), abs=1e-10)


def test_intercept_only_negbin_mean_is_sample_mean(rng):
    y = rng.poisson(rng.gamma(1.5, 2.0, 500)).astype(float)
    fit = fit_negbin(np.ones((500, 1)), y)
    assert fit.family == "negbin"
    assert math.exp(fit.coefficients[0]) == pytest.approx(y.mean(), rel=1e-10)


def test_negbin_monotone_path(rng):
    X = _design(rng, 300, 3)
    y = rng.poisson(np.exp(0.5 + 0.3 * X[:, 2]) * rng.gamma(1.0, 1.0, 300)).astype(float)
    fit = fit_negbin(X, y)
    assert np.all(np.diff(fit.loglik_path) >= -1e-9 * abs(fit.log_likelihood))


def test_duplicated_column_is_singular(rng):
    X = _design(rng, 50, 2)
    X = np.column_stack([X, X[:, 1]])
    y = rng.poisson(2.0, 50).astype(float)
    with pytest.raises(SingularInformation):
        fit_negbin(X, y)
    with pytest.raises(SingularInformation):
        fit_logistic(X, (y > 1).astype(float))


def test_all_zero_counts_rejected():
    with pytest.raises(SingularInformation):
        fit_negbin(np.ones((5, 1)), np.zeros(5))


def test_non_integer_counts_rejected():
    with pytest.raises(ValueError):
        fit_negbin(np.ones((3, 1)), np.array([1.0, 0.5, 2.0]))


def test_separation_is_flagged():
    x = np.linspace(-1, 1, 20)
    X = np.column_stack([np.ones(20), x])
    y = (x > 0).astype(float)
    with pytest.warns(SeparationDetected):
        fit = fit_logistic(X, y)
    assert fit.separation and not fit.converged
    p = fit.predict(X)
    assert np.all((p > 0) & (p < 1))


def _panel_from(x, g):
    n = len(g)
    return PanelDataset(np.array([str(i) for i in range(n)], dtype=object), np.zeros(n), np.zeros(n),
                        g, x.reshape(n, 1), ("x",))


def test_select_power_order_linear_logit():
    rng = np.random.default_rng(5000)
    x = rng.normal(size=5000)
    g = (rng.random(5000) < 1 / (1 + np.exp(-(-1 + 0.8 * x)))).astype(int)
    spec = select_power_order(_panel_from(x, g), FeatureSpec(power_orders={"x": 1}), cv=10)
    assert spec.power_orders == (("x", 1),)


def test_select_power_order_quadratic_dgp():
    smp = generate_replicate(DgpParams(), 2000, substream(77, 0))
    spec = select_power_order(smp.data, FeatureSpec(base_columns=("x1",), power_orders={"x2": 1}))
    assert spec.power_orders == (("x2", 2),)


def test_select_power_order_singleton(rng):
    smp = generate_replicate(DgpParams(), 200, rng)
    spec = select_power_order(smp.data, FeatureSpec(power_orders={"x2": 1}), orders=[3])
    assert spec.power_orders == (("x2", 3),)


def test_cv_scores_mark_separated_orders_ineligible():
    x = np.linspace(-1, 1, 30)
    g = (x > 0).astype(int)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        scores = cv_power_order_scores(_panel_from(x, g), FeatureSpec(power_orders={"x": 1}), [1, 2], cv=5)
    assert scores == {1: None, 2: None}
    with pytest.raises(SingularInformation):
        select_power_order(_panel_from(x, g), FeatureSpec(power_orders={"x": 1}), [1, 2], cv=5)
