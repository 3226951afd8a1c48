"""Exception hierarchy.

The CLI maps these onto exit codes: configuration problems exit 2, bad or
missing data exit 3, numeric failures exit 4.
"""


class LensError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(LensError):
    exit_code = 2


class DataError(LensError):
    exit_code = 3


class ParseError(DataError):
    """A file could not be parsed. ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class DomainError(LensError, ValueError):
    """Arguments outside an operation's domain (bad k, mismatched shapes, ...)."""

    exit_code = 3


class CapacityError(DomainError):
    """Diverse selection could not place ``requested`` separated pixels."""

    def __init__(self, requested, selected, achievable):
        self.requested = requested
        self.selected = selected
        self.achievable = achievable
        super().__init__(
            f"greedy diverse selection placed {selected} of {requested} pixels "
            f"(at most {achievable} mutually separated pixels fit this grid)"
        )


class NumericError(LensError, ArithmeticError):
    exit_code = 4


class UndefinedCorrelationError(NumericError):
    """Rank correlation requested for a map with zero rank variance."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""
