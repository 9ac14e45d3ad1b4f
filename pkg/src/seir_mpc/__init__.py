"""Model predictive control of a constrained SEIR epidemic without terminal ingredients."""

from seir_mpc.errors import (
    BudgetExceededError,
    ConfigError,
    DomainError,
    InfeasibleError,
    SeirMpcError,
    ThresholdNotReachedError,
)
from seir_mpc.model import ModelParams
from seir_mpc.mpc import MpcConfig, epidemic_lifetime, mpc_feedback, run_mpc
from seir_mpc.ocp import OcpSpec, SolverOptions, solve

__version__ = "0.1.0"

__all__ = [
    "BudgetExceededError",
    "ConfigError",
    "DomainError",
    "InfeasibleError",
    "ModelParams",
    "MpcConfig",
    "OcpSpec",
    "SeirMpcError",
    "SolverOptions",
    "ThresholdNotReachedError",
    "epidemic_lifetime",
    "mpc_feedback",
    "run_mpc",
    "solve",
]
