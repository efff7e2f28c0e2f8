"""Exception and warning types shared across the package."""


class EmberError(Exception):
    """Base class for all package errors."""


class ConfigError(EmberError, ValueError):
    """Invalid or incomplete run configuration."""


class DataError(EmberError, ValueError):
    """Malformed, inconsistent or out-of-range input data."""


class NumericalError(EmberError, ArithmeticError):
    """A linear system or factorization could not be solved reliably."""


class EmberWarning(UserWarning):
    """Non-fatal condition worth surfacing (empty bins, snapped data, ...)."""


class ConvergenceWarning(EmberWarning):
    """An iterative procedure stopped at its iteration cap."""
