"""Exception hierarchy shared across the library."""


class FedGameError(Exception):
    """Base class for all errors raised by this package."""


class StructuralError(FedGameError):
    """Shape or layout mismatch between values that must agree."""


class ConfigError(FedGameError):
    """Invalid or inconsistent configuration."""


class UsageError(FedGameError):
    """An operation was called with unusable inputs (e.g. empty data)."""


class FormatError(FedGameError):
    """Malformed input file; the message names the column or line."""


class NumericError(FedGameError):
    """A computation produced non-finite values."""
