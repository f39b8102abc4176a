import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from drdid.bootstrap import percentile_interval, quantile_type7
from drdid.diagnostics import compute_balance
from drdid.estimators import (bundle_from_arrays, estimate_effect, estimate_theta0_direct,
                              estimate_theta0_dr, estimate_theta0_weighting)
from drdid.panel import PanelDataset

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@st.composite
def panels(draw, min_n=4, max_n=60):
    n = draw(st.integers(min_n, max_n))
    g = draw(arrays(np.int8, n, elements=st.integers(0, 1)))
    g[0], g[1] = 1, 0
    y0 = draw(arrays(np.float64, n, elements=st.integers(0, 20).map(float)))
    y1 = draw(arrays(np.float64, n, elements=st.integers(0, 20).map(float)))
    x = draw(arrays(np.float64, (n, 2), elements=st.integers(-8000, 8000).map(lambda v: v / 8)))
    d = PanelDataset(np.array([str(i) for i in range(n)], dtype=object), y0, y1, g, x, ("a", "b"))
    e = draw(arrays(np.float64, n, elements=st.floats(0.01, 0.99)))
    mu = draw(arrays(np.float64, n, elements=st.floats(0.01, 30)))
    nu = draw(arrays(np.float64, n, elements=st.floats(0.01, 30)))
    return d, e, mu, nu


@settings(max_examples=200, deadline=None)
@given(panels())
def test_dr_forms_identical_for_any_nuisances(args):
    d, e, mu, nu = args
    nb = bundle_from_arrays(d, e, mu, nu)
    a = estimate_theta0_dr(d, nb, "weighting_augmented")
    b = estimate_theta0_dr(d, nb, "regression_augmented")
    assert abs(a - b) <= 1e-9 * (1 + abs(a) + np.abs(nb.weights).sum())


@settings(max_examples=100, deadline=None)
@given(panels())
def test_constant_propensity_weighting_equals_direct(args):
    d = args[0]
    e = np.full(d.n, d.n_treated / d.n)
    w = estimate_theta0_weighting(d, bundle_from_arrays(d, e))
    assert abs(w - estimate_theta0_direct(d)) <= 1e-10 * (1 + abs(w))


@settings(max_examples=100, deadline=None)
@given(panels())
def test_effect_assembly(args):
    d, e, mu, nu = args
    for est in ("direct", "regression", "weighting", "double_robust"):
        r = estimate_effect(d, est, bundle_from_arrays(d, e, mu, nu))
        assert r.cfd == r.theta1 - r.theta0
        assert r.cmf_defined == (r.theta0 > 0)


@settings(max_examples=100, deadline=None)
@given(panels(), st.floats(0.01, 100), finite)
def test_asd_affine_invariance(args, scale, shift):
    d, e, _, _ = args
    w = np.where(d.treated == 1, 1.0, e / (1 - e))
    a = compute_balance(d, d.covariates, w)
    b = compute_balance(d, d.covariates * scale + shift, w)
    for ra, rb in zip(a.per_feature, b.per_feature):
        assert ra[0] == rb[0]
        assert np.isclose(ra[1], rb[1], rtol=1e-6, atol=1e-9)
        assert np.isclose(ra[2], rb[2], rtol=1e-6, atol=1e-9)
        assert ra[1] >= 0 and ra[2] >= 0


@given(arrays(np.float64, st.integers(1, 200), elements=finite), st.floats(0.001, 0.5))
def test_percentile_interval_ordered_and_nested(v, alpha):
    lo, hi = percentile_interval(v, alpha)
    assert v.min() <= lo <= hi <= v.max()
    lo2, hi2 = percentile_interval(v, min(0.999, alpha * 1.5))
    assert lo <= lo2 + 1e-12 and hi2 <= hi + 1e-12


@given(arrays(np.float64, st.integers(1, 100), elements=finite))
def test_quantile_monotone_in_q(v):
    qs = np.linspace(0, 1, 11)
    vals = [quantile_type7(v, q) for q in qs]
    assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))
