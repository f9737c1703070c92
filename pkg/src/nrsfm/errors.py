"""Exception hierarchy shared by all modules.

Exit-code mapping used by the CLI:
    2 -> InvalidInputError (validation)
    3 -> FormatError (file format / I/O)
    4 -> NumericalError (degenerate data, divergence)
    5 -> InsufficientCleanFramesError
"""


class NrsfmError(Exception):
    """Base class for all library errors."""


class InvalidInputError(NrsfmError):
    """Malformed arguments, dimension mismatches, bad parameters."""


class FormatError(NrsfmError):
    """Unreadable or corrupt file; carries a byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = "%s (at byte offset %d)" % (message, offset)
        super().__init__(message)
        self.offset = offset


class NumericalError(NrsfmError):
    """Base class for numerical failures."""


class DegenerateMotionError(NumericalError):
    """Measurement matrix has numerical rank below 3."""


class DegenerateFrameError(NumericalError):
    """A per-frame shape Gram matrix is singular or ill-conditioned."""


class AmbiguousProjectionError(NumericalError):
    """Rotation projection is not unique (two or more zero singular values)."""


class DegenerateAlignmentError(NumericalError):
    """Alignment sample points are collinear."""


class DivergenceError(NumericalError):
    """Non-finite values appeared inside an iterative solve."""


class InsufficientCleanFramesError(NrsfmError):
    """No initial window of unoccluded frames long enough for the prior."""
