"""Exception hierarchy shared by every layer of the package."""


class DuskError(Exception):
    """Base class for all package errors."""


class ArgumentError(DuskError, ValueError):
    """Invalid argument value (rank 0, empty list, mode out of range, ...)."""


class ShapeError(DuskError, ValueError):
    """Operands have incompatible shapes."""


class RankError(DuskError, ValueError):
    """CP models have an unexpected or mismatched rank."""


class NumericalError(DuskError, ArithmeticError):
    """A numerical routine failed (non-PSD Gram, solver did not converge)."""


class DataError(DuskError):
    """Input data violates an invariant. ``offset`` is a byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegenerateInputError(DataError):
    """Input is well-formed but degenerate (zero tensor, single-class labels)."""


class NonFiniteError(DataError):
    """NaN or Inf encountered where finite values are required."""


class FormatError(DataError):
    """Malformed binary or text file."""


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncationError(FormatError):
    def __init__(self, expected, actual, what="file", unit="bytes"):
        super().__init__(
            f"truncated {what}: expected {expected} {unit}, got {actual}",
            offset=actual if unit == "bytes" else None,
        )
        self.expected = expected
        self.actual = actual


class NonFinitePayloadError(FormatError, NonFiniteError):
    """NaN or Inf stored in a file payload."""


class LabelError(FormatError):
    """Label outside {-1, +1}."""
