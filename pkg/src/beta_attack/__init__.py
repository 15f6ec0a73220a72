"""Budgeted, explanation-guided evasion attacks on graph-based sensor anomaly detectors."""

from .errors import BetaError, ConfigError, DependencyError, NumericalError

__version__ = "0.1.0"

__all__ = ["BetaError", "ConfigError", "DependencyError", "NumericalError", "__version__"]
