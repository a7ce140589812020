class CrateError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CrateError, ValueError):
    pass


class NonFiniteError(CrateError, FloatingPointError):
    pass


class FactorizationError(CrateError, ArithmeticError):
    pass


class RankDeficientError(CrateError, ArithmeticError):
    pass


class PreconditionError(CrateError, ValueError):
    pass


class ConfigError(CrateError, ValueError):
    """Invalid or unknown configuration."""


class FormatError(CrateError, ValueError):
    """Malformed on-disk file (IDX, dataset or checkpoint)."""
