"""Exception hierarchy shared by every module."""


class MicroseqError(Exception):
    """Base class for all package errors."""


class FormatError(MicroseqError):
    """A binary file could not be decoded.

    ``offset`` is the byte position where decoding failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagic(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class NonFiniteValue(FormatError, ValueError):
    pass


class IoFailure(MicroseqError, OSError):
    pass


class TooFewCases(MicroseqError, ValueError):
    pass


class EmptyPool(MicroseqError, ValueError):
    pass


class DimMismatch(MicroseqError, ValueError):
    pass


class BadDims(MicroseqError, ValueError):
    pass


class BadClass(MicroseqError, ValueError):
    pass


class DomainError(MicroseqError, ValueError):
    pass


class ShapeMismatch(MicroseqError, ValueError):
    pass


class StaleCache(MicroseqError, RuntimeError):
    pass


class EmptyDataset(MicroseqError, ValueError):
    pass


class EmptyBank(MicroseqError, ValueError):
    pass


class LengthMismatch(MicroseqError, ValueError):
    pass


class TrainingDiverged(MicroseqError, ArithmeticError):
    """Raised when a loss term becomes non-finite during training."""


class ConfigError(MicroseqError, ValueError):
    pass
