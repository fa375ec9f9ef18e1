"""Exception types shared across the toolkit."""


class LoopkitError(Exception):
    """Base class for all toolkit errors."""


class InvalidInput(LoopkitError):
    """An argument violates a precondition (bad shape, range, or length)."""


class ShapeError(InvalidInput):
    """Array shapes are incompatible with a layer or operation."""


class EstimationFailed(LoopkitError):
    """A signal-analysis estimate (tempo, downbeat) could not be made."""


class TooShort(InvalidInput):
    """The input is too short for the requested analysis."""


class NoInstance(LoopkitError):
    """A loop has no active bar to excerpt audio from."""


class InsufficientData(LoopkitError):
    """Not enough songs, loops, or pairs to satisfy the request."""


class Undeterminable(LoopkitError):
    """The question has no answer for this input (e.g. silence)."""


class TrainingDiverged(LoopkitError):
    """The training loss became NaN or infinite."""


class IngestError(InvalidInput):
    """A corpus file is missing or unreadable."""
