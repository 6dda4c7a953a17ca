"""Exception hierarchy.

Every error raised on purpose by the package derives from ``DP2VAEError`` so the
CLI can map error classes onto exit codes.
"""


class DP2VAEError(Exception):
    """Base class."""


class InvalidParameterError(DP2VAEError, ValueError):
    pass


class ShapeError(DP2VAEError, ValueError):
    pass


class NotPSDError(DP2VAEError, ValueError):
    pass


class InvalidStateError(DP2VAEError, RuntimeError):
    pass


class InvalidLabelError(DP2VAEError, ValueError):
    pass


class NumericError(DP2VAEError, ArithmeticError):
    pass


class UnsupportedOrderError(InvalidParameterError):
    pass


class GridError(DP2VAEError, ValueError):
    pass


class DataError(DP2VAEError, ValueError):
    """Well-formed input carrying out-of-contract values."""


class IdxFormatError(DataError):
    """Malformed IDX container. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(DP2VAEError, ValueError):
    pass


class IntegrityError(CheckpointError):
    pass


class AuditViolation(DP2VAEError, AssertionError):
    """Raised when an exact per-step divergence exceeds its bound."""


class DegenerateDataError(DataError):
    pass


class InsufficientDataError(DataError):
    pass
