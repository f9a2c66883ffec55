"""Exception hierarchy shared by every dwfl module."""


class DWFLError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DWFLError, ValueError):
    pass


class ShapeError(DWFLError, ValueError):
    pass


class DataError(DWFLError, ValueError):
    pass


class AlignmentError(DataError):
    """Sequences that should share one aligned length do not."""

    def __init__(self, message, offending_ids=()):
        super().__init__(message)
        self.offending_ids = list(offending_ids)


class UsageError(DWFLError, RuntimeError):
    pass


class AggregationError(DWFLError, ValueError):
    pass


class FederationError(DWFLError, RuntimeError):
    pass


class MetricError(DWFLError, ValueError):
    pass


class CheckpointError(DWFLError, ValueError):
    pass


class DivergenceError(DWFLError, ArithmeticError):
    """Training produced a non-finite loss."""
