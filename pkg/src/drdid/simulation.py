"""Monte Carlo study of the DID estimators under a count-outcome DGP.

Covariates ``X1 ~ Bernoulli(0.25)`` and ``X2 | X1 ~ N(2 + 6 X1, 2^2)``;
treatment from a quadratic logit in ``X2``; before/after counts are NB2 with
group- and period-specific log-quadratic means and a common dispersion.
The counterfactual after-mean of treated units, ``nu00 + mu01 - mu00``,
satisfies conditional parallel trends by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .bootstrap import BootstrapConfig, bootstrap_replicates, summarize_replicates
from .errors import DegenerateDesign, TooManyFailures
from .estimators import Estimator, EstimationRequest, estimate_requests
from .panel import FeatureSpec, PanelDataset
from .streams import derive_seed, parallel_map, substream

COVARIATES = ("x1", "x2")
CORRECT_SPEC = FeatureSpec(base_columns=("x1",), power_orders=(("x2", 2),))
SPEC_CHOICES = ("correct", "misspecified")


@dataclass(frozen=True)
class DgpParams:
    """Coefficients act on ``(1, X1, X2, X2^2)``."""

    x1_prob: float = 0.25
    x2_mean_base: float = 2.0
    x2_mean_x1: float = 6.0
    x2_sd: float = 2.0
    ps_coefs: tuple[float, ...] = (-2.0, 1.0, -0.2, 0.04)
    dispersion: float = 2.5
    mu00: tuple[float, ...] = (-2.0, 0.4, 0.43, -0.022)
    mu01: tuple[float, ...] = (-3.0, 0.3, 0.43, -0.022)
    nu00: tuple[float, ...] = (-1.9, 0.5, 0.43, -0.022)
    nu11: tuple[float, ...] = (-2.5, 0.1, 0.43, -0.022)
    true_cfd: float | None = -0.078
    true_log_cmf: float | None = math.log(0.862)

    @property
    def mean_coefs(self) -> dict[str, tuple[float, ...]]:
        return {"mu00": self.mu00, "mu01": self.mu01, "nu00": self.nu00, "nu11": self.nu11}


def _basis(x1, x2) -> np.ndarray:
    return np.column_stack([np.ones_like(x2), x1, x2, x2 * x2])


def true_functions(params: DgpParams, x1, x2) -> dict[str, np.ndarray]:
    """Propensity and the four mean functions (plus counterfactual ``nu01``)."""
    B = _basis(np.asarray(x1, dtype=float), np.asarray(x2, dtype=float))
    out = {"e": expit(B @ np.asarray(params.ps_coefs))}
    for name, c in params.mean_coefs.items():
        out[name] = np.exp(B @ np.asarray(c))
    out["nu01"] = out["nu00"] + out["mu01"] - out["mu00"]
    return out


def _draw_covariates(params: DgpParams, n: int, rng: np.random.Generator):
    x1 = (rng.random(n) < params.x1_prob).astype(float)
    x2 = rng.normal(params.x2_mean_base + params.x2_mean_x1 * x1, params.x2_sd)
    return x1, x2


def draw_negbin(rng: np.random.Generator, mean: np.ndarray, dispersion: float) -> np.ndarray:
    """NB2 draws with variance ``mean + mean**2 / dispersion`` (gamma-Poisson)."""
    rate = rng.gamma(shape=dispersion, scale=mean / dispersion)
    return rng.poisson(rate).astype(float)


@dataclass(frozen=True, eq=False)
class SimulatedSample:
    data: PanelDataset
    e: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    retries: int = 0


def _draw_units(params: DgpParams, n: int, rng: np.random.Generator, max_retries: int):
    for attempt in range(max_retries + 1):
        x1, x2 = _draw_covariates(params, n, rng)
        f = true_functions(params, x1, x2)
        g = (rng.random(n) < f["e"]).astype(np.int8)
        if 0 < g.sum() < n:
            break
    else:
        raise DegenerateDesign(f"single-group sample after {max_retries} retries")
    if not np.all(f["nu01"] > 0):
        raise ValueError("counterfactual mean nu00 + mu01 - mu00 is not positive")
    return g, x1, x2, f, attempt


def _panel(g, x1, x2, m_before, m_after, dispersion, rng) -> PanelDataset:
    y0 = draw_negbin(rng, m_before, dispersion)
    y1 = draw_negbin(rng, m_after, dispersion)
    return PanelDataset(
        ids=np.array([str(i) for i in range(len(g))], dtype=object), y_before=y0, y_after=y1,
        treated=g, covariates=np.column_stack([x1, x2]), covariate_names=COVARIATES,
    )


def generate_replicate(params: DgpParams, n: int, rng: np.random.Generator,
                       max_retries: int = 100) -> SimulatedSample:
    """One simulated panel plus the true propensity and control mean functions."""
    g, x1, x2, f, retries = _draw_units(params, n, rng, max_retries)
    data = _panel(g, x1, x2, np.where(g == 1, f["mu01"], f["mu00"]),
                  np.where(g == 1, f["nu11"], f["nu00"]), params.dispersion, rng)
    return SimulatedSample(data, f["e"], f["mu00"], f["nu00"], retries)


def generate_placebo_replicate(params: DgpParams, n: int, rng: np.random.Generator,
                               treated_trend: float = 1.0, max_retries: int = 100) -> SimulatedSample:
    """Two pre-treatment periods with no trend: both counts share the first-period mean.

    ``treated_trend`` multiplies the treated units' second-period mean, so any
    value other than 1 breaks parallel trends.
    """
    g, x1, x2, f, retries = _draw_units(params, n, rng, max_retries)
    m = np.where(g == 1, f["mu01"], f["mu00"])
    data = _panel(g, x1, x2, m, np.where(g == 1, treated_trend * m, m), params.dispersion, rng)
    return SimulatedSample(data, f["e"], f["mu00"], f["mu00"], retries)


def compute_truth(params: DgpParams, draws: int = 10**7, seed: int = 0,
                  chunk: int = 10**6) -> tuple[float, float]:
    """Monte Carlo ``(CFD, CMF)`` over covariate draws, weighting by ``e(X)``."""
    rng = substream(seed, 7)
    s_e = s1 = s0 = 0.0
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        x1, x2 = _draw_covariates(params, m, rng)
        f = true_functions(params, x1, x2)
        s_e += f["e"].sum()
        s1 += (f["e"] * f["nu11"]).sum()
        s0 += (f["e"] * f["nu01"]).sum()
        done += m
    theta1, theta0 = s1 / s_e, s0 / s_e
    return theta1 - theta0, theta1 / theta0


def check_truth(params: DgpParams, draws: int = 10**7, seed: int = 0,
                cfd_tol: float = 0.003, cmf_tol: float = 0.01) -> tuple[float, float]:
    """Re-derive the stated true values and raise if they disagree."""
    cfd, cmf = compute_truth(params, draws, seed)
    if params.true_cfd is not None and abs(cfd - params.true_cfd) > cfd_tol:
        raise ValueError(f"DGP truth drift: CFD {cfd:.5f} vs stated {params.true_cfd}")
    if params.true_log_cmf is not None and abs(cmf - math.exp(params.true_log_cmf)) > cmf_tol:
        raise ValueError(f"DGP truth drift: CMF {cmf:.5f} vs stated {math.exp(params.true_log_cmf):.3f}")
    return cfd, cmf


def misspecify(spec: FeatureSpec, which: str = "ps") -> FeatureSpec:
    """Drop ``X1`` and every power of ``X2`` above the linear term."""
    if which not in ("ps", "outcome"):
        raise ValueError("which must be 'ps' or 'outcome'")
    return FeatureSpec(
        base_columns=tuple(c for c in spec.base_columns if c != "x1"),
        power_orders=tuple((c, 1) for c, _ in spec.power_orders),
        log_transform=spec.log_transform,
        include_intercept=spec.include_intercept,
        standardize=spec.standardize,
    )


@dataclass(frozen=True)
class SimulationScenario:
    estimator: Estimator
    ps_spec: str = "correct"
    outcome_spec: str = "correct"
    n_units: int = 2000
    replicates: int = 500
    bootstrap: BootstrapConfig = field(default_factory=lambda: BootstrapConfig(replicates=500))
    seed: int = 20190101

    def __post_init__(self):
        est = Estimator(self.estimator)
        object.__setattr__(self, "estimator", est)
        for s in (self.ps_spec, self.outcome_spec):
            if s not in SPEC_CHOICES:
                raise ValueError(f"spec must be one of {SPEC_CHOICES}")
        # not-applicable switches are normalised so equal scenarios compare equal
        if not est.needs_propensity:
            object.__setattr__(self, "ps_spec", "correct")
        if not est.needs_outcome:
            object.__setattr__(self, "outcome_spec", "correct")

    @property
    def label(self) -> str:
        est = self.estimator
        if est is Estimator.DIRECT:
            return "Direct"
        if est is Estimator.REGRESSION:
            return "REG" if self.outcome_spec == "correct" else "REG-mis"
        if est is Estimator.WEIGHTING:
            return "WT" if self.ps_spec == "correct" else "WT-mis"
        ps_ok, out_ok = self.ps_spec == "correct", self.outcome_spec == "correct"
        return {(True, True): "DR", (False, True): "DR-po",
                (True, False): "DR-ps", (False, False): "DR-mis"}[(ps_ok, out_ok)]

    def request(self) -> EstimationRequest:
        ps = CORRECT_SPEC if self.ps_spec == "correct" else misspecify(CORRECT_SPEC, "ps")
        out = CORRECT_SPEC if self.outcome_spec == "correct" else misspecify(CORRECT_SPEC, "outcome")
        return EstimationRequest(self.estimator, ps, out)

    def _group_key(self):
        b = self.bootstrap
        return (self.n_units, self.replicates, self.seed, b.replicates, b.alpha)


_LABELS = {
    "Direct": ("direct", "correct", "correct"),
    "REG": ("regression", "correct", "correct"),
    "REG-mis": ("regression", "correct", "misspecified"),
    "WT": ("weighting", "correct", "correct"),
    "WT-mis": ("weighting", "misspecified", "correct"),
    "DR": ("double_robust", "correct", "correct"),
    "DR-po": ("double_robust", "misspecified", "correct"),
    "DR-ps": ("double_robust", "correct", "misspecified"),
    "DR-mis": ("double_robust", "misspecified", "misspecified"),
}
SCENARIO_LABELS = tuple(_LABELS)


def scenario_from_label(label: str, **kwargs) -> SimulationScenario:
    try:
        est, ps, out = _LABELS[label]
    except KeyError:
        raise ValueError(f"unknown scenario {label!r}; choose from {', '.join(_LABELS)}") from None
    return SimulationScenario(est, ps, out, **kwargs)


def standard_scenarios(n_units: int = 2000, replicates: int = 500, bootstrap: int = 500,
                       seed: int = 20190101, labels=SCENARIO_LABELS) -> list[SimulationScenario]:
    cfg = BootstrapConfig(replicates=bootstrap, seed=seed)
    return [scenario_from_label(l, n_units=n_units, replicates=replicates, bootstrap=cfg, seed=seed)
            for l in labels]


@dataclass(frozen=True)
class MetricRow:
    label: str
    abs_bias_cfd: float
    rmse_cfd: float
    coverage_cfd: float
    abs_bias_log_cmf: float
    rmse_log_cmf: float
    coverage_log_cmf: float
    n_effective_replicates: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _replicate_job(args):
    params, n, seed, requests, n_boot, alpha, r = args
    sample = generate_replicate(params, n, substream(seed, r, 0))
    data = sample.data
    points, fits = estimate_requests(data, requests, quiet=True)
    ok = [i for i, p in enumerate(points) if not isinstance(p, Exception)]
    cfg = BootstrapConfig(replicates=n_boot, alpha=alpha, seed=derive_seed(seed, r, 1), workers=1)
    values = bootstrap_replicates(data, [requests[i] for i in ok], cfg, starts=fits) if n_boot else []
    out: list = [None] * len(requests)
    for j, i in enumerate(ok):
        p = points[i]
        if not n_boot:
            out[i] = (p.cfd, p.cmf if p.cmf_defined else math.nan, None, None)
            continue
        try:
            res = summarize_replicates(p, [row[j] for row in values], cfg)
        except TooManyFailures:
            continue
        out[i] = (p.cfd, p.cmf if p.cmf_defined else math.nan, res.ci_cfd, res.ci_cmf)
    return out


def _metrics(label: str, rows: list, true_cfd: float, true_log_cmf: float) -> MetricRow:
    cfd = np.array([r[0] for r in rows])
    bias = abs(cfd.mean() - true_cfd)
    rmse = math.sqrt(np.mean((cfd - true_cfd) ** 2))
    cover = [r[2][0] <= true_cfd <= r[2][1] for r in rows if r[2] is not None]
    log_rows = [r for r in rows if math.isfinite(r[1]) and r[1] > 0]
    lc = np.log([r[1] for r in log_rows]) if log_rows else np.array([math.nan])
    lbias = abs(lc.mean() - true_log_cmf)
    lrmse = math.sqrt(np.mean((lc - true_log_cmf) ** 2))
    lcover = [r[3][0] <= math.exp(true_log_cmf) <= r[3][1] for r in log_rows if r[3] is not None]
    pct = lambda v: 100.0 * float(np.mean(v)) if v else math.nan  # noqa: E731
    return MetricRow(label, float(bias), rmse, pct(cover), float(lbias), lrmse, pct(lcover), len(rows))


def run_study(scenarios, params: DgpParams = DgpParams(), workers: int | None = None,
              max_drop_fraction: float = 0.05) -> list[MetricRow]:
    """Bias, RMSE and bootstrap-CI coverage for each scenario.

    Scenarios sharing ``(n_units, replicates, seed, bootstrap size)`` reuse the
    same simulated datasets and bootstrap resamples: replicate ``r`` draws
    from the substream ``(seed, r)`` regardless of which scenarios are run,
    and each distinct nuisance model is fitted once per (re)sample.
    """
    scenarios = list(scenarios)
    if params.true_cfd is None or params.true_log_cmf is None:
        cfd, cmf = compute_truth(params)
        params = replace(params, true_cfd=cfd, true_log_cmf=math.log(cmf))
    groups: dict = {}
    for i, sc in enumerate(scenarios):
        groups.setdefault(sc._group_key(), []).append(i)
    rows: list = [None] * len(scenarios)
    for key, idxs in groups.items():
        n, reps, seed, n_boot, alpha = key
        requests = sorted({scenarios[i].request() for i in idxs}, key=repr)
        jobs = [(params, n, seed, requests, n_boot, alpha, r) for r in range(reps)]
        results = parallel_map(_replicate_job, jobs, workers)
        for i in idxs:
            k = requests.index(scenarios[i].request())
            got = [res[k] for res in results if res[k] is not None]
            dropped = reps - len(got)
            if not got or dropped > max_drop_fraction * reps:
                raise TooManyFailures(f"{scenarios[i].label}: {dropped} of {reps} replicates failed")
            rows[i] = _metrics(scenarios[i].label, got, params.true_cfd, params.true_log_cmf)
    return rows
