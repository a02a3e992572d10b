"""Simulation and Monte Carlo checks for SDEs driven by Brownian motion and
compensated Poisson random measures: support probes, coupled auxiliary
equations, Girsanov densities and Galerkin truncations."""

from .errors import AcceptanceRateError, ConfigurationError, ModelError, NumericError, QuadratureWarning
from .rng import RngStreamKey, Substream, stream_key

__all__ = [
    "AcceptanceRateError",
    "ConfigurationError",
    "ModelError",
    "NumericError",
    "QuadratureWarning",
    "RngStreamKey",
    "Substream",
    "stream_key",
]

__version__ = "0.1.0"
