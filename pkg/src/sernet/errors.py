"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class SernetError(Exception):
    """Base class for all errors raised by the package."""

    exit_code = 1


class ShapeError(SernetError, ValueError):
    """An input tensor has the wrong shape for the requested operation."""


class ConfigError(SernetError, ValueError):
    """A configuration value is invalid or yields an impossible geometry."""


class UsageError(SernetError, RuntimeError):
    """An API was called in an invalid order (e.g. a second backward)."""


class DataError(SernetError, ValueError):
    """Malformed files, bad labels, missing dataset entries."""

    exit_code = 2


class NumericError(SernetError, ArithmeticError):
    """A non-finite value appeared during training or evaluation."""

    exit_code = 3
