"""Differentially private generative training with entropic OT losses."""

from .exceptions import DataFormatError, NumericalFailure, SkipStep, ValidationError

__version__ = "0.1.0"

__all__ = ["DataFormatError", "NumericalFailure", "SkipStep", "ValidationError", "__version__"]
