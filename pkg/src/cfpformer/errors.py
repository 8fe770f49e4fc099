"""Exception types shared across the package."""


class CfpError(Exception):
    """Base class for package errors."""


class DimensionError(CfpError, ValueError):
    pass


class ConfigError(CfpError, ValueError):
    pass


class UsageError(CfpError, RuntimeError):
    pass


class NumericError(CfpError, ArithmeticError):
    """Raised when a forward op produces NaN/Inf.

    ``op`` names the operation that first produced the non-finite value.
    """

    def __init__(self, message: str, op: str | None = None):
        super().__init__(message)
        self.op = op


class FormatError(CfpError, ValueError):
    """Malformed CFPT/CFPC/PGM payload."""
