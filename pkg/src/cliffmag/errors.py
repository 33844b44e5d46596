"""Exception hierarchy shared by every module."""


class CliffmagError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CliffmagError):
    pass


class DimensionError(CliffmagError, ValueError):
    pass


class ArgumentError(CliffmagError, ValueError):
    pass


class InvariantViolation(CliffmagError):
    pass


class NumericError(CliffmagError, ArithmeticError):
    pass


class GenerationError(CliffmagError):
    pass


class FormatError(CliffmagError):
    """Malformed on-disk file. ``field`` names the offending header entry or section."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class SizeError(CliffmagError):
    pass


class StaleCacheError(CliffmagError):
    pass


class ContractViolation(CliffmagError):
    pass
