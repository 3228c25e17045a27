"""Exception types shared across the package.

Each class marks a distinct failure mode so that callers (and the command
line front end) can map problems to specific exit codes instead of pattern
matching on messages.
"""

from __future__ import annotations


class Error(Exception):
    """Base class for all package-specific errors."""


class ConfigError(Error):
    """A configuration value is missing, malformed, or inconsistent."""


class ConvergenceError(Error):
    """An iterative routine stopped before reaching its tolerance.

    Attributes
    ----------
    residual : float
        Residual at the final iterate.
    iterations : int
        Number of iterations performed.
    """

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class NumericalError(Error):
    """A computation produced non-finite or untrustworthy values."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class DegenerateInstanceError(NumericalError):
    """A problem instance admits no meaningful solution (e.g. a constraint
    block whose multiplier vanishes identically)."""


class AssemblyError(Error):
    """A discrete problem failed its build-time consistency checks,
    typically because the input kernels are not properly normalized."""


class EvaluationError(Error):
    """An objective evaluation hit an invalid value (e.g. a nonpositive
    inner average under a logarithm)."""


class UnsupportedError(Error):
    """The requested operation is outside the supported range."""
