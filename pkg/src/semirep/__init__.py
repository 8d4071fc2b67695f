"""Partially linear repeated-measures regression with kernel-smoothed
nonparametric component, population-level summaries and their variances."""
from .avar import (PluginVariance, bootstrap_variance, cross_covariance, plug_in_variance,
                   plugin_estimate)
from .backfit import FitConfig, FitResult, fit
from .core_model import GAUSSIAN, ClusterDataset, ModelParams
from .errors import NumericalError, SemirepError, ValidationError
from .io import load_dataset, write_dataset
from .kernels import BACKEND
from .simlab import (KenyaDesign, MissingnessMechanism, SimDesign, apply_missingness,
                     generate_kenya_like, generate_sim_dataset, run_experiment, true_kappa_oracle)
from .summaries import (POPULATION_VARIANCE, PiModel, SummaryEstimate, get_functional,
                        kappa_gen, kappa_imputed, kappa_ipw, kappa_semi, survival_curve,
                        survival_functional)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "GAUSSIAN", "ClusterDataset", "FitConfig", "FitResult", "KenyaDesign",
    "MissingnessMechanism", "ModelParams", "NumericalError", "POPULATION_VARIANCE", "PiModel",
    "PluginVariance", "SemirepError", "SimDesign", "SummaryEstimate", "ValidationError",
    "apply_missingness", "bootstrap_variance", "cross_covariance", "fit", "generate_kenya_like",
    "generate_sim_dataset", "get_functional", "kappa_gen", "kappa_imputed", "kappa_ipw",
    "kappa_semi", "load_dataset", "plug_in_variance", "plugin_estimate", "run_experiment",
    "survival_curve", "survival_functional", "true_kappa_oracle", "write_dataset",
]
