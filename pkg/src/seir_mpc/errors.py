"""Exception types raised by the seir_mpc package."""

from __future__ import annotations


class SeirMpcError(Exception):
    """Base class for all package errors."""


class DomainError(SeirMpcError, ValueError):
    """A state, input or parameter lies outside its admissible domain."""


class BudgetExceededError(SeirMpcError):
    """A simulation or iteration budget ran out before the goal was met."""


class InfeasibleError(SeirMpcError):
    """No admissible input satisfying the infection cap was found.

    Attributes:
        iteration: MPC loop index at which the failure happened, if any.
        state: State at which the failure happened, if known.
    """

    def __init__(self, message: str, iteration: int | None = None, state=None) -> None:
        super().__init__(message)
        self.iteration = iteration
        self.state = state


class ThresholdNotReachedError(SeirMpcError):
    """A trajectory never dropped below a requested infection threshold."""


class ConfigError(SeirMpcError, ValueError):
    """Malformed or unknown configuration entry."""
