"""Exception types shared across the package.

The estimation routines distinguish three failure modes that callers
treat differently: bad inputs (ArgumentError / DomainError), problems
that have no solution at the requested point (InfeasibleError), and
iteration limits (NonConvergence).
"""


class GelkitError(Exception):
    """Base class for all package-specific errors."""


class ArgumentError(GelkitError, ValueError):
    """Malformed or inconsistent arguments (shapes, ranges, config)."""


class DomainError(GelkitError, ValueError):
    """Parameter vector outside the model's open parameter domain."""


class InfeasibleError(GelkitError):
    """Zero is not interior to the convex hull of the moment vectors,
    so the multiplier equation has no solution at this parameter."""


class InfeasibleAtInit(InfeasibleError):
    """The starting parameter value is already infeasible; a different
    theta_init is needed."""


class NonConvergence(GelkitError):
    """Iteration limit reached before the residual tolerance was met."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SingularError(GelkitError):
    """A matrix that must be inverted is numerically singular
    (condition number beyond the supported range)."""


class BracketError(GelkitError):
    """Confidence-interval bracketing walked past its search range
    without finding the required sign change."""


class ParseError(GelkitError, ValueError):
    """Malformed numeric text input; carries 1-based row/column."""

    def __init__(self, message, row=None, col=None):
        super().__init__(message)
        self.row = row
        self.col = col


class NonFiniteError(ParseError):
    """NaN or infinity encountered where finite numbers are required."""
