"""Pfaffian Monte Carlo estimators for paired fermion states under Gaussian maps."""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import CapacityError, PfmcError, ValidationError  # noqa: E402

__all__ = ["__version__", "PfmcError", "ValidationError", "CapacityError"]
