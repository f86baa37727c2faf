"""Exception hierarchy shared across the package."""


class MoEHealthError(Exception):
    """Base class for all errors raised by moehealth."""


class ShapeError(MoEHealthError, ValueError):
    """Array dimensions do not agree."""


class NonFiniteError(MoEHealthError, ValueError):
    """An input contained NaN or infinity."""


class TapeError(MoEHealthError, RuntimeError):
    """The computation tape was used out of order."""


class ConfigError(MoEHealthError, ValueError):
    """A configuration value is invalid."""


class DataValidationError(MoEHealthError, ValueError):
    """A sample or dataset record violates its invariants."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UndefinedMetricError(MoEHealthError, ValueError):
    """A metric is undefined for the given batch (e.g. AUROC with one class)."""
