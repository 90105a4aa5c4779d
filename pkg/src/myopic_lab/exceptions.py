"""Exception types shared across the lab.

Each maps onto one failure class of the command-line harness: validation
problems exit with code 2, numerical failures with code 3.
"""

from __future__ import annotations

__all__ = [
    "ConfigurationError",
    "NumericalDomainError",
    "EllipticityError",
    "DepthExhaustionError",
    "ConvergenceError",
    "DivergenceError",
    "BlowUpError",
]


class ConfigurationError(ValueError):
    """Inputs or parameters violate a precondition."""


class NumericalDomainError(ArithmeticError):
    """A computation left the domain where it is defined (non-finite values)."""


class EllipticityError(NumericalDomainError):
    """The diffusion matrix is singular where an inverse is required."""


class DepthExhaustionError(NumericalDomainError):
    """An order was sent into a book with zero displayed depth."""


class ConvergenceError(NumericalDomainError):
    """An iterative solver stopped before reaching its tolerance.

    Attributes
    ----------
    residual : float
        Last residual seen by the solver.
    """

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class DivergenceError(NumericalDomainError):
    """Training parameters left the divergence guard; the partial trace is attached."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class BlowUpError(NumericalDomainError):
    """Too many simulated paths produced non-finite states."""
