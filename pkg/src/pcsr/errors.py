"""Exception taxonomy shared across the package."""


class PcsrError(Exception):
    """Base class for every error this package raises on purpose."""


class ConfigurationError(PcsrError, ValueError):
    """Bad dimensions, ranges, or option values supplied by the caller."""


class DegenerateInputError(PcsrError, ValueError):
    """Input that is structurally valid but carries no usable signal."""


class NumericError(PcsrError, ArithmeticError):
    """Non-finite values or numerically impossible requests."""


class FormatError(PcsrError, ValueError):
    """Corrupt or truncated container file.

    ``offset`` is the byte position at which reading failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class LogicError(PcsrError, RuntimeError):
    """Internal contract violation: mismatched indices, impossible labels."""


class TrainingError(PcsrError, RuntimeError):
    """Aborted training run (non-finite loss, empty clean set).

    ``checkpoint`` holds the path of the last good checkpoint if one was
    written before the abort.
    """

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
