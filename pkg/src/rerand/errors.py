"""Exception hierarchy and diagnostic warnings shared across the package."""


class RerandError(Exception):
    """Base class for all package errors."""


class DataError(RerandError):
    """Bad input data: malformed files, schema violations, broken invariants."""


class ParseError(DataError):
    """A cell could not be parsed; message names the offending row/column."""


class ValidationError(DataError):
    """Structurally valid input that violates a contract (e.g. arm not in {0,1})."""


class NumericError(RerandError):
    """Numerical failure: singular systems, non-convergence, degenerate sampling."""


class SingularMatrixError(NumericError):
    """A matrix required to be invertible is numerically singular."""


class ConvergenceError(NumericError):
    """An iterative solver failed to reach its tolerance."""


class NonTerminationError(NumericError):
    """A rejection loop exceeded its attempt budget."""


class DiagnosticWarning(UserWarning):
    """Non-fatal numerical guard fired (clamping, flooring, clipping)."""
