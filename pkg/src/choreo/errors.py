"""Exception types raised by the engine, the cache, and the tooling."""


class ChoreoError(Exception):
    """Base class for all engine errors."""


class InvalidCallError(ChoreoError):
    """Malformed call: duplicate parents, offsets/parents length mismatch, bad values."""


class EmptyHeaderError(InvalidCallError):
    """Decode requires a non-empty header."""


class UnknownMessageError(ChoreoError):
    """A referenced message id does not exist."""


class WindowOverflowError(ChoreoError):
    """A token would be placed at a logical position outside the context window."""


class CapacityError(ChoreoError):
    """The preallocated cache has no room for the requested tokens."""


class OffsetConflictError(ChoreoError):
    """Two calls in one parallel batch place a shared parent at different offsets."""


class AllMaskedError(ChoreoError):
    """Masked softmax over a row with no visible entries."""


class ShapeError(ChoreoError, ValueError):
    """Operand dimensions do not line up."""


class DeltaRangeError(ChoreoError):
    """Requested rotation delta is outside the precomputed table."""


class ScriptError(ChoreoError):
    """Workflow script failed to parse or validate."""


class TraceMismatchError(ChoreoError):
    """Two traces disagree structurally where agreement is required."""


class NondeterminismError(ChoreoError):
    """Fixture regeneration produced different bytes on a second run."""
