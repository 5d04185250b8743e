"""Exception types raised across the package."""

from __future__ import annotations


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigurationError(ValueError):
    """Incompatible or malformed configuration (dimensions, mechanisms, grids)."""


class SchemaError(KeyError):
    """Input table is missing a declared column."""


class DataError(ValueError):
    """Input table holds a value that cannot be encoded."""

    def __init__(self, message: str, row: int | None = None, value=None):
        super().__init__(message)
        self.row = row
        self.value = value


class TruncatedRunError(RuntimeError):
    """The data stream ran out before the final checkpoint.

    ``partial`` holds whatever snapshots were recorded before exhaustion.
    """

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial
