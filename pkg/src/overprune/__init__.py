"""Variational inference for one-hidden-layer tanh MLPs and over-pruning diagnostics."""

from .data import Dataset, TeacherSpec, generate_teacher, init_at_truth, load_csv, prepare_split, split, standardize
from .diagnostics import PruneThresholds, PruningReport, collapse_check, posterior_predictive_ll, unit_report
from .network import NetworkShape, ParamPoint, forward, gauss_log_lik, point_gradients
from .numerics import RngState
from .posterior import Family, Prior, VariationalPosterior, init_posterior, kl_diag_gauss, kl_full_gauss, vfe_estimate
from .training import TrainConfig, TrainingTrace, train

__all__ = [
    "Dataset", "TeacherSpec", "generate_teacher", "init_at_truth", "load_csv", "prepare_split", "split",
    "standardize", "PruneThresholds", "PruningReport", "collapse_check", "posterior_predictive_ll",
    "unit_report", "NetworkShape", "ParamPoint", "forward", "gauss_log_lik", "point_gradients", "RngState",
    "Family", "Prior", "VariationalPosterior", "init_posterior", "kl_diag_gauss", "kl_full_gauss",
    "vfe_estimate", "TrainConfig", "TrainingTrace", "train",
]
