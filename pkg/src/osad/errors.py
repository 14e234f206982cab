"""Exception hierarchy shared across the package."""


class OsadError(Exception):
    """Base class for all package errors."""


class ConfigError(OsadError, ValueError):
    """Invalid or incomplete configuration."""


class DataError(OsadError):
    """Missing, empty, or malformed data."""


class ShapeError(OsadError, ValueError):
    """Array shapes incompatible with an operation."""


class NumericError(OsadError, ArithmeticError):
    """Non-finite values encountered during computation."""


class CalibrationError(OsadError):
    """OpenMax calibration could not be performed."""


class ContractError(OsadError, ValueError):
    """Inputs violate a documented precondition."""
