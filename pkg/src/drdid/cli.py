"""Command-line front end: ``drdid analyze | placebo | simulate``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bootstrap import BootstrapConfig, bootstrap_many
from .diagnostics import (DEFAULT_BINS, compute_balance, compute_overlap, placebo_evaluation,
                          write_rows_csv)
from .errors import DrdidError, FittingError, NonConvergence, SingularInformation, ValidationError
from .estimators import ALL_ESTIMATORS, Estimator, EstimationRequest, estimate_requests, fit_nuisance
from .panel import (CsvSchema, FeatureSpec, PanelDataset, expand_features, infer_power_columns,
                    load_csv)
from .glm import cv_power_order_scores
from .simulation import SCENARIO_LABELS, DgpParams, check_truth, run_study, scenario_from_label
from .streams import WORKERS_ENV

log = logging.getLogger("drdid")

SCHEMA_VERSION = "1.0"
EXIT_OK, EXIT_VALIDATION, EXIT_FITTING = 0, 2, 3
BALANCE_MIN_ORDER = 3


def _split(text: str | None) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def _clean(obj):
    """Replace non-finite floats by None so the report is strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


# ------------------------------------------------------------------ analysis

def resolve_specs(data: PanelDataset, covariates, power_cols=None, log_cols=(),
                  ps_power="auto", standardize=False) -> tuple[FeatureSpec, dict | None]:
    """Feature spec shared by the propensity and outcome models.

    Power-series columns default to covariates with more than two distinct
    values. ``ps_power="auto"`` picks the order by cross-validation of the
    propensity model; the CV scores are returned for the report.
    """
    log_cols = list(log_cols)
    rest = [c for c in covariates if c not in log_cols]
    if power_cols is None:
        power_cols = list(infer_power_columns(data, rest))
    unknown = set(power_cols) - set(rest)
    if unknown:
        raise ValidationError(f"power columns not among covariates: {sorted(unknown)}")
    base = [c for c in rest if c not in power_cols]
    order = 1 if ps_power == "auto" else int(ps_power)
    spec = FeatureSpec(tuple(base), tuple((c, order) for c in power_cols), tuple(log_cols),
                       standardize=standardize)
    if ps_power != "auto" or not power_cols:
        return spec, None
    scores = cv_power_order_scores(data, spec)
    eligible = [(v, l) for l, v in scores.items() if v is not None]
    if not eligible:
        raise SingularInformation("no eligible power order: every candidate failed")
    chosen = spec.with_power_order(min(eligible)[1])
    return chosen, {"method": "loocv" if data.n <= 5000 else "10-fold",
                    "scores": {str(k): v for k, v in scores.items()},
                    "selected_order": chosen.power_orders[0][1]}


def _balance_spec(spec: FeatureSpec) -> FeatureSpec:
    return FeatureSpec(spec.base_columns,
                       tuple((c, max(l, BALANCE_MIN_ORDER)) for c, l in spec.power_orders),
                       spec.log_transform, spec.include_intercept, spec.standardize)


def analyze_dataset(data: PanelDataset, estimators=ALL_ESTIMATORS, spec: FeatureSpec | None = None,
                    config: BootstrapConfig | None = None, bins: int = DEFAULT_BINS,
                    placebo: bool = False) -> dict:
    """Point estimates (and bootstrap CIs when ``config`` is given) plus diagnostics.

    Returns a dict with ``estimates``, ``bootstrap``, ``nuisance``, ``balance``,
    ``overlap``, ``placebo`` and ``warnings`` entries, and the raw objects under
    ``_objects`` for optional dumps.
    """
    if spec is None:
        spec = FeatureSpec()
    estimators = [Estimator(e) for e in estimators]
    requests = [EstimationRequest(e, spec, spec) for e in estimators]
    msgs: list[str] = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ps_fit = fit_nuisance(data, ps_spec=spec)
        boot_results = placebo_res = None
        if placebo:
            placebo_res = placebo_evaluation(data, estimators, spec, spec, config)
            boot_results = placebo_res.results
            points = [r.point for r in boot_results]
        elif config is not None:
            boot_results = bootstrap_many(data, requests, config)
            points = [r.point for r in boot_results]
        else:
            points, _ = estimate_requests(data, requests)
            for p in points:
                if isinstance(p, Exception):
                    raise p
    n_nonconv = sum(issubclass(w.category, NonConvergence) for w in caught)
    if n_nonconv:
        msgs.append(f"NonConvergence: {n_nonconv} point-estimate model fit(s) did not converge")
    estimates = []
    for i, p in enumerate(points):
        est = boot_results[i].estimate if boot_results else p
        msgs.extend(f"{est.estimator.value}: {w}" for w in est.warnings)
        estimates.append(est.to_dict())
    boot = None
    if boot_results:
        boot = {"replicates": config.replicates, "alpha": config.alpha, "seed": config.seed,
                "failure_policy": config.failure_policy,
                "per_estimator": [{"estimator": r.point.estimator.value, "n_failed": r.n_failed,
                                   "n_cmf_undefined": r.n_cmf_undefined} for r in boot_results]}
        for r in boot_results:
            if r.n_failed:
                msgs.append(f"BootstrapFailures: {r.point.estimator.value} dropped "
                            f"{r.n_failed} of {config.replicates} replicates")
    balance = compute_balance(data, expand_features(data, _balance_spec(spec)), ps_fit.weights)
    overlap = compute_overlap(data, ps_fit.e_hat, bins)
    if overlap.treated_beyond_control_max:
        msgs.append(f"Extrapolation: {overlap.treated_beyond_control_max} treated unit(s) have "
                    f"propensity above the control maximum {overlap.control_ps_max:.4f}")
    out = {
        "estimates": estimates,
        "bootstrap": boot,
        "nuisance": {"feature_spec": spec.to_dict(), "propensity": ps_fit.propensity.summary()},
        "balance": balance.to_dict(),
        "overlap": overlap.to_dict(),
        "placebo": None if placebo_res is None else
        {"advisory": placebo_res.advisory, "failing": list(placebo_res.failing)},
        "warnings": msgs,
        "_objects": {"propensity": ps_fit, "balance": balance, "overlap": overlap,
                     "bootstrap": boot_results},
    }
    return out


def _estimates_csv(path, estimates: list[dict]) -> None:
    header = ["estimator", "theta1", "theta0", "cfd", "cfd_lower", "cfd_upper",
              "cmf", "cmf_lower", "cmf_upper"]
    rows = []
    for e in estimates:
        ci, cm = e["ci_cfd"] or [None, None], e["ci_cmf"] or [None, None]
        rows.append([e["estimator"], e["theta1"], e["theta0"], e["cfd"], *ci, e["cmf"], *cm])
    _write_rows(path, header, rows)


def _write_rows(path, header, rows) -> None:
    if path is None:
        out = csv.writer(sys.stdout)
        out.writerow(header)
        out.writerows(rows)
    else:
        write_rows_csv(path, header, rows)


def _emit_json(report: dict, path) -> None:
    text = json.dumps(_clean(report), indent=2, allow_nan=False)
    if path is None:
        print(text)
    else:
        Path(path).write_text(text + "\n")


def _load(args) -> PanelDataset:
    covs = _split(args.covariates)
    schema = CsvSchema(args.treatment, args.before, args.after, tuple(covs), args.id)
    return load_csv(args.data, schema, outcome_family=args.outcome_family, strict=not args.lenient)


def _config_echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}


def cmd_analyze(args, placebo: bool = False) -> int:
    t0 = time.perf_counter()
    data = _load(args)
    estimators = [Estimator(e) for e in (_split(args.estimators) or [e.value for e in ALL_ESTIMATORS])]
    if args.ps_power != "auto":
        try:
            int(args.ps_power)
        except ValueError:
            raise ValidationError(f"--ps-power must be an integer or 'auto', got {args.ps_power!r}")
    power_cols = _split(args.power_cols) if args.power_cols is not None else None
    spec, selection = resolve_specs(data, _split(args.covariates), power_cols, _split(args.log_cols),
                                    args.ps_power, args.standardize)
    if placebo and args.bootstrap < 1:
        raise ValidationError("placebo needs --bootstrap >= 1 for the advisory")
    config = None
    if args.bootstrap > 0:
        config = BootstrapConfig(replicates=args.bootstrap, alpha=args.alpha, seed=args.seed,
                                 workers=args.workers)
    res = analyze_dataset(data, estimators, spec, config, args.bins, placebo)
    objs = res.pop("_objects")
    report = {
        "schema_version": SCHEMA_VERSION,
        "tool": "drdid",
        "version": __version__,
        "command": "placebo" if placebo else "analyze",
        "config": _config_echo(args),
        "data": {"n": data.n, "n_treated": data.n_treated, "n_control": data.n_control,
                 "n_dropped": data.n_dropped, "outcome_family": data.outcome_family},
        "power_order_selection": selection,
        **res,
        "timing": {"seconds": time.perf_counter() - t0},
    }
    for w in report["warnings"]:
        log.warning(w)
    if args.format == "json":
        _emit_json(report, args.out)
    else:
        _estimates_csv(args.out, report["estimates"])
    if args.tables_dir:
        d = Path(args.tables_dir)
        d.mkdir(parents=True, exist_ok=True)
        write_rows_csv(d / "overlap_histogram.csv", *objs["overlap"].csv_rows())
        write_rows_csv(d / "balance_asd.csv", *objs["balance"].csv_rows())
    if args.dump_weights:
        fit = objs["propensity"]
        write_rows_csv(args.dump_weights, ["id", "treated", "propensity", "att_weight"],
                       [[data.ids[i], int(data.treated[i]), float(fit.e_hat[i]), float(fit.weights[i])]
                        for i in range(data.n)])
    if args.dump_replicates and objs["bootstrap"]:
        rows = [[r.point.estimator.value, int(b), float(v[0]), None if math.isnan(v[1]) else float(v[1])]
                for r in objs["bootstrap"] for b, v in zip(r.replicate_index, r.replicate_estimates)]
        write_rows_csv(args.dump_replicates, ["estimator", "replicate", "cfd", "cmf"], rows)
    return EXIT_OK


def cmd_placebo(args) -> int:
    return cmd_analyze(args, placebo=True)


# ---------------------------------------------------------------- simulation

def _scenario_labels(text: str) -> list[str]:
    if text.strip().lower() == "all":
        return list(SCENARIO_LABELS)
    lookup = {l.lower(): l for l in SCENARIO_LABELS}
    out = []
    for t in _split(text):
        if t.lower() not in lookup:
            raise ValidationError(f"unknown scenario {t!r}; choose from {', '.join(SCENARIO_LABELS)} or all")
        out.append(lookup[t.lower()])
    return out


def _apply_config_file(args) -> None:
    """Fill simulate flags from a JSON file; explicit flags win."""
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {args.config}: {exc}") from None
    allowed = {"replicates", "bootstrap", "seed", "scenarios", "n", "alpha", "dgp"}
    unknown = set(cfg) - allowed
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    for k, v in cfg.items():
        if k == "scenarios" and isinstance(v, list):
            v = ",".join(v)
        if getattr(args, k, None) is None:
            setattr(args, k, v)


SIM_DEFAULTS = {"replicates": 500, "bootstrap": 500, "seed": 20190101, "scenarios": "all",
                "n": 2000, "alpha": 0.05, "dgp": None}


def cmd_simulate(args) -> int:
    if args.config:
        _apply_config_file(args)
    for k, v in SIM_DEFAULTS.items():
        if getattr(args, k, None) is None:
            setattr(args, k, v)
    if args.replicates < 1 or args.bootstrap < 1 or args.n < 2:
        raise ValidationError("--replicates and --bootstrap must be >= 1 and --n >= 2")
    params = DgpParams()
    if args.dgp:
        try:
            params = replace(params, **{k: tuple(v) if isinstance(v, list) else v
                                        for k, v in args.dgp.items()})
        except TypeError as exc:
            raise ValidationError(f"bad dgp override: {exc}") from None
    rederived = None
    if not args.skip_truth_check:
        cfd, cmf = check_truth(params, draws=args.truth_draws)
        rederived = {"cfd": cfd, "cmf": cmf, "draws": args.truth_draws}
    labels = _scenario_labels(args.scenarios)
    boot = BootstrapConfig(replicates=args.bootstrap, alpha=args.alpha, seed=args.seed)
    scenarios = [scenario_from_label(l, n_units=args.n, replicates=args.replicates,
                                     bootstrap=boot, seed=args.seed) for l in labels]
    rows = run_study(scenarios, params, workers=args.workers)
    report = {
        "schema_version": SCHEMA_VERSION,
        "tool": "drdid",
        "version": __version__,
        "command": "simulate",
        "config": {k: v for k, v in _config_echo(args).items() if k not in ("out", "format", "workers")},
        "truth": {"cfd": params.true_cfd, "log_cmf": params.true_log_cmf, "rederived": rederived},
        "rows": [r.to_dict() for r in rows],
    }
    if args.format == "json":
        _emit_json(report, args.out)
    else:
        header = list(rows[0].to_dict())
        _write_rows(args.out, header, [list(_clean(r.to_dict()).values()) for r in rows])
    return EXIT_OK


# -------------------------------------------------------------------- parser

def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="input CSV, one row per unit")
    p.add_argument("--treatment", required=True, help="0/1 treatment column")
    p.add_argument("--before", required=True, help="outcome column before the change")
    p.add_argument("--after", required=True, help="outcome column after the change")
    p.add_argument("--covariates", default="", help="comma-separated covariate columns")
    p.add_argument("--id", default=None, help="unit id column")
    p.add_argument("--ps-power", default="auto", help="power-series order 1-5 or 'auto' (CV)")
    p.add_argument("--power-cols", default=None,
                   help="columns expanded as power series (default: covariates with >2 values)")
    p.add_argument("--log-cols", default="", help="covariates entered as log(x)")
    p.add_argument("--standardize", action="store_true", help="centre/scale power-series columns")
    p.add_argument("--estimators", default="", help="subset of direct,regression,weighting,double_robust")
    p.add_argument("--bootstrap", type=int, default=500, help="bootstrap replicates; 0 skips CIs")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None, help=f"processes (default ${WORKERS_ENV} or 1)")
    p.add_argument("--outcome-family", choices=("count", "continuous"), default="count")
    p.add_argument("--lenient", action="store_true", help="drop rows with missing values")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS, help="propensity histogram bins")
    p.add_argument("--out", default=None, help="report path (default stdout)")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--tables-dir", default=None, help="write overlap/balance CSV tables here")
    p.add_argument("--dump-weights", default=None, help="CSV of per-unit propensity and ATT weight")
    p.add_argument("--dump-replicates", default=None, help="CSV of bootstrap replicate estimates")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drdid", description="DID effect estimation for count outcomes")
    parser.add_argument("--version", action="version", version=f"drdid {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="estimate effects with bootstrap CIs and diagnostics")
    _data_args(a)
    a.set_defaults(func=cmd_analyze)

    p = sub.add_parser("placebo", help="'no treatment' check on two pre-treatment periods")
    _data_args(p)
    p.set_defaults(func=cmd_placebo)

    s = sub.add_parser("simulate", help="Monte Carlo study of the estimators")
    s.add_argument("--replicates", type=int, default=None)
    s.add_argument("--bootstrap", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--scenarios", default=None, help=f"'all' or a list of {','.join(SCENARIO_LABELS)}")
    s.add_argument("--n", type=int, default=None, help="units per simulated dataset")
    s.add_argument("--alpha", type=float, default=None)
    s.add_argument("--config", default=None, help="JSON file with the same keys (plus 'dgp' overrides)")
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--skip-truth-check", action="store_true")
    s.add_argument("--truth-draws", type=int, default=10**7)
    s.add_argument("--out", default=None)
    s.add_argument("--format", choices=("json", "csv"), default="json")
    s.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="drdid: %(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except FittingError as exc:
        print(f"drdid: fitting failed: {exc}", file=sys.stderr)
        return EXIT_FITTING
    except (ValidationError, ValueError, OSError) as exc:
        print(f"drdid: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DrdidError as exc:
        print(f"drdid: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
