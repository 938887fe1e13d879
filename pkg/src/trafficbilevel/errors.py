"""Exception types raised across the package."""

from __future__ import annotations


class DataError(ValueError):
    """Input data could not be parsed or is inconsistent."""


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        where = ""
        if source:
            where += f"{source}"
        if line is not None:
            where += f"{':' if where else 'line '}{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.source = source


class ValidationError(DataError):
    pass


class DomainError(ValueError):
    """An argument lies outside the domain of a formula (e.g. ln of zero)."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or an ill-posed linear system."""
