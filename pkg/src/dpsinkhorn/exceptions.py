"""Exception types shared across the package.

The CLI maps each family to a stable exit code: validation errors exit with 2,
data/IO errors with 3 and numerical failures with 4.
"""


class ValidationError(ValueError):
    """Invalid configuration or argument value.

    ``field`` names the offending configuration key when there is one.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DataFormatError(IOError):
    """A data file could not be parsed."""


class NumericalFailure(ArithmeticError):
    """A NaN or infinity appeared during an iterative computation."""

    def __init__(self, message, iteration=None, record=None):
        super().__init__(message)
        self.iteration = iteration
        self.record = record


class SkipStep(Exception):
    """Raised when a step has nothing to act on (e.g. an empty Poisson batch)."""
