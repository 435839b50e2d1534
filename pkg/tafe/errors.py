"""
Exception hierarchy shared by every TAFE component.

The CLI maps these onto exit codes; library code only raises them.
"""


class TafeError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(TafeError, ValueError):
    pass


class ConfigError(TafeError, ValueError):
    pass


class DataError(TafeError, ValueError):
    pass


class UsageError(TafeError, ValueError):
    pass


class NumericError(TafeError, ArithmeticError):
    """Raised when training produces a non-finite loss."""


class GeometryRetryError(DataError):
    pass
