"""Exception hierarchy shared by all xalign modules."""


class XAlignError(Exception):
    """Base class for every error raised by xalign."""


class ShapeError(XAlignError, ValueError):
    """Array dimensions do not match what an operation expects."""


class NumericError(XAlignError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class FormatError(XAlignError, ValueError):
    """An input file is malformed."""


class ValidationError(XAlignError, ValueError):
    """A dataset violates a structural invariant (duplicate ids, bad splits...)."""


class InsufficientDataError(XAlignError, ValueError):
    """Too few samples for the requested operation."""


class TrainingError(XAlignError, RuntimeError):
    """Training diverged."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class ConfigError(XAlignError, ValueError):
    """A configuration value or checkpoint/dataset pairing is invalid."""
