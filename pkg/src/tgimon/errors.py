"""Exception types shared across the package.

Everything derives from TgimonError so callers can catch the whole family,
and from ValueError so sloppy call sites that only know stdlib types still
fail loudly in the right category.
"""

from __future__ import annotations


class TgimonError(ValueError):
    """Base class for all package errors."""


class GridMismatch(TgimonError):
    """Time grid is inconsistent, or two grids that must agree do not."""


class ConfigError(TgimonError):
    """A configuration value is out of range, unknown, or malformed."""


class CalibrationError(TgimonError):
    """A calibration target cannot be met by any valid parameter value."""


class InsufficientData(TgimonError):
    """Not enough accumulated rounds to evaluate the requested statistic."""


class InvariantViolation(TgimonError):
    """An internal physical or algebraic invariant was broken by the caller."""


class UndefinedResult(TgimonError):
    """The requested quantity is mathematically undefined for these inputs."""
