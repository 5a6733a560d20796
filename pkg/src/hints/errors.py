"""Exception hierarchy.

Every error carries enough context to locate the problem. The CLI maps the
three families onto exit codes: ``UsageError`` -> 1, ``DataError`` -> 2,
``NumericalError`` -> 3.
"""

from __future__ import annotations


class HintsError(Exception):
    """Base class for all package errors."""


class UsageError(HintsError):
    """Invalid command line or configuration value."""

    def __init__(self, message: str, flag: str | None = None):
        self.flag = flag
        super().__init__(f"{flag}: {message}" if flag else message)


class ConfigConflict(UsageError):
    """Two configuration sources (or two fields) cannot both hold."""

    def __init__(self, message: str, sources: tuple[str, ...] = ()):
        self.sources = sources
        suffix = f" (sources: {', '.join(sources)})" if sources else ""
        super().__init__(message + suffix)


class DataError(HintsError, ValueError):
    """Input data violates a precondition."""


class EmptyFile(DataError):
    def __init__(self, path):
        self.path = path
        super().__init__(f"{path}: file has no data rows")


class MissingColumn(DataError):
    def __init__(self, column: str, path=None):
        self.column = column
        self.path = path
        super().__init__(f"{path}: missing column {column!r}")


class NonNumericCell(DataError):
    """A cell that does not parse as a finite real.

    ``row`` is the 1-based data row (header excluded), ``col`` the 1-based
    column position in the file.
    """

    def __init__(self, row: int, col: int, text: str = "", path=None):
        self.row = row
        self.col = col
        self.text = text
        super().__init__(f"{path}: non-numeric cell {text!r} at row {row}, col {col}")


class SeriesTooShort(DataError):
    def __init__(self, T: int, L: int, h: int):
        self.T, self.L, self.h = T, L, h
        super().__init__(f"series of length T={T} is shorter than L+h={L}+{h}")


class ConstantVariable(DataError):
    def __init__(self, d: int, name: str | None = None):
        self.d = d
        super().__init__(f"variable {d} ({name}) is constant on the fitting range")


class PeriodTooLarge(DataError):
    def __init__(self, T: int, period: int):
        self.T, self.period = T, period
        super().__init__(f"period {period} needs T >= {2 * period}, got T={T}")


class DegenerateVariable(DataError):
    def __init__(self, d: int):
        self.d = d
        super().__init__(f"residual of variable {d} has zero variance")


class ShapeMismatch(DataError):
    def __init__(self, what: str, expected, got):
        self.expected, self.got = expected, got
        super().__init__(f"{what}: expected shape {expected}, got {got}")


class EmptyTestSet(DataError):
    def __init__(self):
        super().__init__("no evaluation windows")


class UnknownVariable(DataError):
    def __init__(self, name: str, known):
        super().__init__(f"unknown variable {name!r}; known: {', '.join(known)}")


class CorruptCheckpoint(DataError):
    pass


class VersionMismatch(DataError):
    def __init__(self, message: str, expected=None, got=None):
        self.expected, self.got = expected, got
        super().__init__(message)


class NumericalError(HintsError, ArithmeticError):
    """Non-finite loss or parameters during training."""
