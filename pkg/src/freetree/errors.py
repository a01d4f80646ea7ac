"""Exception types shared across the package.

Grouped so the CLI can map failures onto exit codes: schema or contract
problems (bad columns, bad roles, leaked clusters) are user-fixable input
errors, while rank and insufficient-data problems are numeric failures.
"""

from __future__ import annotations


class FreetreeError(Exception):
    """Base class for all package-specific errors."""


class SchemaError(FreetreeError):
    """A required column, role, or config key is missing or malformed."""


class ParseError(FreetreeError):
    """A cell could not be parsed; carries the offending 1-based row number."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class RowError(FreetreeError):
    """A row is unusable (missing cluster id or response)."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class LeakageError(FreetreeError):
    """Train and evaluation data share cluster ids."""


class InsufficientDataError(FreetreeError):
    """Too few rows (or clusters) for the requested fit."""


class RankError(FreetreeError):
    """A design matrix is rank deficient; carries the dependent column names."""

    def __init__(self, message: str, columns: list[str] | None = None):
        super().__init__(message)
        self.columns = list(columns or [])


#: Errors that indicate bad input rather than a numeric failure.
CONTRACT_ERRORS = (SchemaError, ParseError, RowError, LeakageError, ValueError)

#: Errors that indicate a numeric failure during fitting.
NUMERIC_ERRORS = (InsufficientDataError, RankError, FloatingPointError)
