"""Predictive coding networks: inference, learning and their classical equivalents."""

from .errors import (ArgumentError, DivergenceError, DomainError, FormatError, NumericalError,
                     PredCodeError, StateError, StructuralError, UnsupportedConfigurationError)
from .network import (NetworkParams, NetworkSpec, NetworkState, compute_errors, free_energy,
                      infer_step, run_inference, weight_step)

__version__ = "0.1.0"

__all__ = [
    "ArgumentError", "DivergenceError", "DomainError", "FormatError", "NumericalError",
    "PredCodeError", "StateError", "StructuralError", "UnsupportedConfigurationError",
    "NetworkParams", "NetworkSpec", "NetworkState", "compute_errors", "free_energy",
    "infer_step", "run_inference", "weight_step",
]
