"""Nonparametric percentile bootstrap for the DID effect estimates.

Whole unit records are resampled, so the before/after correlation within a
unit is preserved, and every nuisance model is refitted on each replicate.
Replicate ``b`` draws from the substream ``(seed, b)``; results do not
depend on how replicates are spread over workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import TooManyFailures
from .estimators import EffectEstimate, EstimationRequest, estimate_requests
from .panel import PanelDataset
from .streams import default_workers, parallel_map, substream

FAILURE_POLICIES = ("drop_and_report", "abort_at_threshold")


@dataclass(frozen=True)
class BootstrapConfig:
    replicates: int = 500
    alpha: float = 0.05
    seed: int = 0
    refit_policy: str = "full_refit"
    failure_policy: str = "drop_and_report"
    abort_fraction: float = 0.10
    workers: int | None = None

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.refit_policy != "full_refit":
            raise ValueError("only full_refit is supported")
        if self.failure_policy not in FAILURE_POLICIES:
            raise ValueError(f"failure_policy must be one of {FAILURE_POLICIES}")


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    point: EffectEstimate
    ci_cfd: tuple[float, float]
    ci_cmf: tuple[float, float] | None
    replicate_estimates: np.ndarray  # (B - n_failed, 2): cfd, cmf (nan if undefined)
    replicate_index: np.ndarray
    n_failed: int
    n_cmf_undefined: int

    @property
    def estimate(self) -> EffectEstimate:
        """Point estimate carrying the intervals."""
        return replace(self.point, ci_cfd=self.ci_cfd, ci_cmf=self.ci_cmf)


def quantile_type7(values, q: float) -> float:
    """Hyndman-Fan type 7 sample quantile (linear interpolation of order stats)."""
    x = np.sort(np.asarray(values, dtype=float))
    n = x.size
    if n == 0:
        raise ValueError("quantile of empty sample")
    h = (n - 1) * q
    lo = int(math.floor(h))
    hi = min(lo + 1, n - 1)
    return float(x[lo] + (h - lo) * (x[hi] - x[lo]))


def percentile_interval(values, alpha: float) -> tuple[float, float]:
    return quantile_type7(values, alpha / 2), quantile_type7(values, 1 - alpha / 2)


def _replicate_chunk(args) -> list:
    data, requests, seed, b_values, starts = args
    out = []
    for b in b_values:
        rng = substream(seed, b)
        idx = rng.integers(0, data.n, size=data.n)
        g = data.treated[idx]
        if g.min() == g.max():
            out.append([None] * len(requests))
            continue
        sample = data.take(idx)
        results, _ = estimate_requests(sample, requests, starts=starts, quiet=True)
        out.append([None if isinstance(r, Exception) else (r.cfd, r.cmf if r.cmf_defined else math.nan)
                    for r in results])
    return out


def bootstrap_replicates(data: PanelDataset, requests, config: BootstrapConfig,
                         starts: dict | None = None) -> list[list]:
    """Raw replicate values: ``out[b][i]`` is ``(cfd, cmf)`` or None on failure."""
    workers = default_workers() if config.workers is None else config.workers
    n_chunks = max(1, min(config.replicates, workers * 4)) if workers > 1 else 1
    bs = np.arange(config.replicates)
    chunks = [c.tolist() for c in np.array_split(bs, n_chunks)]
    parts = parallel_map(_replicate_chunk,
                         [(data, list(requests), config.seed, c, starts) for c in chunks], workers)
    return [row for part in parts for row in part]


def summarize_replicates(point: EffectEstimate, values: list, config: BootstrapConfig) -> BootstrapResult:
    ok = [(b, v) for b, v in enumerate(values) if v is not None]
    n_failed = len(values) - len(ok)
    frac = n_failed / len(values)
    if not ok or (config.failure_policy == "abort_at_threshold" and frac > config.abort_fraction):
        raise TooManyFailures(f"{n_failed} of {len(values)} bootstrap replicates failed")
    est = np.array([v for _, v in ok], dtype=float).reshape(-1, 2)
    cmf = est[:, 1][np.isfinite(est[:, 1])]
    ci_cfd = percentile_interval(est[:, 0], config.alpha)
    ci_cmf = percentile_interval(cmf, config.alpha) if cmf.size else None
    return BootstrapResult(point, ci_cfd, ci_cmf, est, np.array([b for b, _ in ok]),
                           n_failed, int(est.shape[0] - cmf.size))


def bootstrap_many(data: PanelDataset, requests, config: BootstrapConfig) -> list[BootstrapResult]:
    """Bootstrap several estimator requests on shared resamples."""
    requests = list(requests)
    points, fits = estimate_requests(data, requests)
    for p in points:
        if isinstance(p, Exception):
            raise p
    values = bootstrap_replicates(data, requests, config, starts=fits)
    return [summarize_replicates(points[i], [row[i] for row in values], config)
            for i in range(len(requests))]


def bootstrap_ci(data: PanelDataset, estimator, ps_spec=None, outcome_spec=None,
                 config: BootstrapConfig = BootstrapConfig()) -> BootstrapResult:
    req = EstimationRequest(estimator, ps_spec, outcome_spec)
    return bootstrap_many(data, [req], config)[0]
