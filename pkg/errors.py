"""Exception hierarchy shared by the model, optimizer and harness modules."""
from __future__ import annotations


class ModelError(Exception):
    """Base class for every error raised by this code base."""


class ConfigError(ModelError, ValueError):
    """Invalid or inconsistent configuration. Messages name the offending keys."""


class DimensionMismatchError(ModelError, ValueError):
    """Per-RRH or per-UE quantities whose shapes do not line up."""


class NumericalError(ModelError, ArithmeticError):
    """A numerical routine could not produce a valid result."""


class DegenerateSignalError(NumericalError):
    """A received dimension carries no power, so the one-bit gain is undefined."""


class InvalidCovarianceError(NumericalError):
    """A normalized correlation falls outside [-1, 1] beyond roundoff."""


class SingularMatrixError(NumericalError):
    """A matrix that must be inverted is (numerically) singular."""

    def __init__(self, message: str, condition_number: float):
        super().__init__(f"{message} (condition number {condition_number:.3e})")
        self.condition_number = condition_number
