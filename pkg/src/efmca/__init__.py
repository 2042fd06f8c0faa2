"""Maximal causes analysis with exponential-family observables."""

from .errors import CapacityError, DegenerateStateError, DomainError, EfMcaError, ParameterError
from .expfam import DISTRIBUTIONS, get_distribution, register_distribution
from .model import ModelParams, compute_M, load_params, log_joint, sample_dataset, save_params

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "DegenerateStateError",
    "DomainError",
    "EfMcaError",
    "ParameterError",
    "DISTRIBUTIONS",
    "get_distribution",
    "register_distribution",
    "ModelParams",
    "compute_M",
    "load_params",
    "log_joint",
    "sample_dataset",
    "save_params",
    "__version__",
]
