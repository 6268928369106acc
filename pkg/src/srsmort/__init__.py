"""Unified Bayesian estimation of cause-specific mortality rates from tabulated counts."""

__version__ = "0.1.0"

from .data import TabulatedDataset, load_dataset, write_dataset
from .engine import LatentGaussianModel, PosteriorResult, fit, predict_log_rates
from .modelspec import ModelSpec, WalkSpec, default_spec, load_spec

__all__ = [
    "LatentGaussianModel",
    "ModelSpec",
    "PosteriorResult",
    "TabulatedDataset",
    "WalkSpec",
    "default_spec",
    "fit",
    "load_dataset",
    "load_spec",
    "predict_log_rates",
    "write_dataset",
]
