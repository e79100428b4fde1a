"""Exception types shared across the package."""


class SymboxError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(SymboxError, ValueError):
    pass


class NumericError(SymboxError, ArithmeticError):
    """A computation produced a non-finite value.

    ``op`` names the primitive (or loss term) that produced it.
    """

    def __init__(self, message, op=None, step=None):
        super().__init__(message)
        self.op = op
        self.step = step


class DegenerateCodeError(NumericError):
    pass


class DatasetFormatError(SymboxError, IOError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class ConfigError(InvalidArgumentError):
    pass
