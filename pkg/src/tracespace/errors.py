"""Exception types raised across the package."""


class TraceSpaceError(Exception):
    """Base class for all package errors."""


class NonPositiveDepth(TraceSpaceError, ValueError):
    pass


class HorizonMismatch(TraceSpaceError, ValueError):
    pass


class ShapeMismatch(TraceSpaceError, ValueError):
    pass


class NoMotionFound(TraceSpaceError):
    pass


class BehindCamera(TraceSpaceError):
    pass


class NoValidOverlap(TraceSpaceError, ValueError):
    pass


class AllDepthMissing(TraceSpaceError, ValueError):
    pass


class StreamMismatch(TraceSpaceError, ValueError):
    pass


class OddGrid(TraceSpaceError, ValueError):
    pass


class TauOutOfRange(TraceSpaceError, ValueError):
    pass


class EmptyTrace(TraceSpaceError, ValueError):
    pass


class NonFiniteLoss(TraceSpaceError, FloatingPointError):
    """Raised when a training step produces a non-finite loss.

    ``sample_index`` names the first offending batch element (or ``None`` when
    the culprit cannot be isolated).
    """

    def __init__(self, message, sample_index=None):
        super().__init__(message)
        self.sample_index = sample_index


class CheckpointError(TraceSpaceError, IOError):
    pass


class FormatError(TraceSpaceError, ValueError):
    """Malformed on-disk data."""


class InsufficientTracks(TraceSpaceError):
    """Fewer usable tracks than grid cells at the reference frame."""
