"""Exception hierarchy shared by the receiver stages."""


class LeoCombineError(Exception):
    """Base class for all package errors."""


class DomainError(LeoCombineError, ValueError):
    """An argument lies outside the domain an operation is defined on."""


class TruncationError(LeoCombineError):
    """A buffer ends before the frame it is supposed to contain."""


class InsufficientEvidenceError(LeoCombineError):
    """Too few heatmap rows carry energy to fit a packet line."""


class AlignmentError(LeoCombineError):
    """A packet could not be aligned against the anchor."""


class NoPacketError(LeoCombineError):
    """The receive pipeline found nothing to decode."""


class PipelineError(LeoCombineError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
