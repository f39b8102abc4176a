import math

import numpy as np
import pytest

from drdid.bootstrap import BootstrapConfig
from drdid.errors import DegenerateDesign
from drdid.estimators import Estimator
from drdid.panel import FeatureSpec, expand_features
from drdid.simulation import (CORRECT_SPEC, SCENARIO_LABELS, DgpParams, SimulationScenario,
                              check_truth, compute_truth, draw_negbin, generate_placebo_replicate,
                              generate_replicate, misspecify,
                              run_study, scenario_from_label, standard_scenarios, true_functions)
from drdid.streams import substream


def test_treated_fraction_near_twenty_percent():
    shares = [generate_replicate(DgpParams(), 2000, substream(1, r)).data.treated_share
              for r in range(100)]
    assert abs(np.mean(shares) - 0.20) <= 0.02


def test_degenerate_propensity_exhausts_retries():
    p = DgpParams(ps_coefs=(-1e6, 0.0, 0.0, 0.0))
    with pytest.raises(DegenerateDesign):
        generate_replicate(p, 50, substream(0), max_retries=5)


def test_control_before_mean_matches_integral():
    p = DgpParams()
    smp = generate_replicate(p, 400_000, substream(2, 2))
    d = smp.data
    c = d.treated == 0
    rng = substream(9, 9)
    x1 = (rng.random(10**6) < 0.25).astype(float)
    x2 = rng.normal(2 + 6 * x1, 2)
    f = true_functions(p, x1, x2)
    target = ((1 - f["e"]) * f["mu00"]).sum() / (1 - f["e"]).sum()
    se = d.y_before[c].std() / math.sqrt(c.sum())
    assert abs(d.y_before[c].mean() - target) < 3 * se + 2e-3


def test_negbin_draws_have_nb2_variance():
    y = draw_negbin(substream(3), np.full(400_000, 2.0), 2.5)
    assert y.mean() == pytest.approx(2.0, abs=0.01)
    assert y.var() == pytest.approx(2.0 + 4.0 / 2.5, rel=0.02)


def test_oracle_side_channel(rng):
    smp = generate_replicate(DgpParams(), 100, rng)
    f = true_functions(DgpParams(), smp.data.column("x1"), smp.data.column("x2"))
    assert np.array_equal(smp.e, f["e"]) and np.array_equal(smp.mu, f["mu00"])
    assert np.all(f["nu01"] > 0)


def test_misspecify():
    mis = misspecify(CORRECT_SPEC, "ps")
    assert mis.base_columns == () and mis.power_orders == (("x2", 1),)
    assert misspecify(mis, "ps") == mis
    assert misspecify(CORRECT_SPEC, "outcome") == mis
    smp = generate_replicate(DgpParams(), 20, substream(0))
    assert expand_features(smp.data, mis).columns == ("(intercept)", "x2")
    with pytest.raises(ValueError):
        misspecify(CORRECT_SPEC, "both")


def test_scenario_labels_and_normalisation():
    assert [scenario_from_label(l).label for l in SCENARIO_LABELS] == list(SCENARIO_LABELS)
    direct = SimulationScenario("direct", "misspecified", "misspecified")
    assert direct == SimulationScenario(Estimator.DIRECT)
    po = scenario_from_label("DR-po")
    assert po.ps_spec == "misspecified" and po.outcome_spec == "correct"
    assert po.request().ps_spec == misspecify(CORRECT_SPEC, "ps")
    with pytest.raises(ValueError):
        scenario_from_label("DR-xx")


def _small(labels, replicates=3, boot=10, seed=5, n=300):
    return standard_scenarios(n_units=n, replicates=replicates, bootstrap=boot, seed=seed, labels=labels)


def test_single_replicate_aggregation():
    row = run_study(_small(["WT"], replicates=1))[0]
    assert row.rmse_cfd == pytest.approx(row.abs_bias_cfd, rel=1e-12)
    assert row.coverage_cfd in (0.0, 100.0) and row.n_effective_replicates == 1


def test_study_is_deterministic_and_order_invariant():
    a = run_study(_small(["Direct", "DR", "REG-mis"]))
    b = run_study(_small(["REG-mis", "Direct", "DR"]))
    c = run_study(_small(["DR"]))
    assert a[0] == b[1] and a[1] == b[2] and a[2] == b[0]
    assert c[0] == a[1]
    for r in a:
        assert r.rmse_cfd >= r.abs_bias_cfd and r.rmse_log_cmf >= r.abs_bias_log_cmf
        assert 0 <= r.coverage_cfd <= 100


def test_workers_do_not_change_study():
    a = run_study(_small(["DR-ps", "WT-mis"], replicates=4), workers=1)
    b = run_study(_small(["DR-ps", "WT-mis"], replicates=4), workers=2)
    assert a == b


def test_truth_check_detects_drift():
    with pytest.raises(ValueError, match="drift"):
        check_truth(DgpParams(true_cfd=-0.05), draws=10**5)
    # an effect-free DGP: treated after-mean equals the counterfactual
    base = DgpParams()
    p = DgpParams(mu01=base.mu00, nu11=base.nu00)
    cfd, cmf = compute_truth(p, draws=10**5)
    assert cfd == pytest.approx(0.0, abs=1e-15) and cmf == pytest.approx(1.0, abs=1e-15)


def test_placebo_replicate_has_no_trend():
    smp = generate_placebo_replicate(DgpParams(), 200_000, substream(6, 6))
    d = smp.data
    for grp in (0, 1):
        m = d.treated == grp
        diff = d.y_after[m] - d.y_before[m]
        assert abs(diff.mean()) < 3 * diff.std() / math.sqrt(m.sum())


def test_unknown_truth_is_computed():
    p = DgpParams(true_cfd=None, true_log_cmf=None)
    row = run_study(_small(["Direct"], replicates=2), p)[0]
    assert row.n_effective_replicates == 2
