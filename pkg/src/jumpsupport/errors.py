"""Exception types shared across the package."""

from __future__ import annotations


class ConfigurationError(ValueError):
    """Invalid user input: shapes, dimensions, ranges, scenario fields."""


class ModelError(ValueError):
    """A model ingredient violates its declared range (e.g. a tilt outside (0, 1))."""


class NumericError(ArithmeticError):
    """A non-finite value surfaced where a finite one was required."""


class AcceptanceRateError(RuntimeError):
    """Rejection sampling accepted too few draws to continue."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


class QuadratureWarning(UserWarning):
    """Mark-space quadrature did not settle under node doubling."""
