"""Case-based least-squares structural equation modelling.

Parameters and per-case latent scores are estimated jointly by minimizing
weighted squared residuals of the model equations.
"""
from .estimator import STRATEGIES, EstimationError, EstimationResult, estimate
from .fit import chi_square_fit, permutation_null_fit, residual_mean_R
from .model import Dataset, Model, load_model, parse_csv, parse_model, print_model, read_csv
from .optimizer import OptimizerConfig
from .simgen import STUDIES, simulate
from .studies import replicate

__all__ = [
    "STRATEGIES", "STUDIES", "Dataset", "EstimationError", "EstimationResult", "Model",
    "OptimizerConfig", "chi_square_fit", "estimate", "load_model", "parse_csv", "parse_model",
    "permutation_null_fit", "print_model", "read_csv", "replicate", "residual_mean_R",
    "simulate",
]
