"""Difference-in-differences estimators for count outcomes.

Direct, outcome-regression, propensity-weighting and double-robust
estimators of the additive (CFD) and multiplicative (CMF) effect on the
treated, with percentile-bootstrap intervals and diagnostics.
"""

__version__ = "0.1.0"

from .bootstrap import BootstrapConfig, BootstrapResult, bootstrap_ci, bootstrap_many
from .diagnostics import (BalanceReport, InfluenceDiagnostics, OverlapReport, PlaceboResult,
                          compute_balance, compute_overlap, influence_variance_comparison,
                          placebo_evaluation)
from .errors import *  # noqa: F401,F403
from .estimators import (ALL_ESTIMATORS, EffectEstimate, EstimationRequest, Estimator, NuisanceBundle,
                         bundle_from_arrays, estimate_effect, estimate_theta0_dr, fit_nuisance)
from .glm import fit_logistic, fit_negbin, fit_poisson, select_power_order
from .panel import CsvSchema, FeatureSpec, PanelDataset, PanelUnit, expand_features, load_csv, write_csv
from .simulation import (DgpParams, MetricRow, SimulationScenario, generate_replicate, misspecify,
                         run_study, standard_scenarios)
