"""Exception types shared across the package."""

from __future__ import annotations


class PfmcError(Exception):
    """Base class for library errors."""


class ValidationError(PfmcError, ValueError):
    """Malformed input: shapes, invariants, or config fields."""


class CapacityError(PfmcError, RuntimeError):
    """An enumerative routine was asked to exceed its size guard."""

    def __init__(self, message: str, guard: int | None = None):
        super().__init__(message)
        self.guard = guard
