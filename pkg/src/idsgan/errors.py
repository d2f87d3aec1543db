"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class UsageError(ValueError):
    """An API was called in a way its contract forbids."""


class DataError(ValueError):
    """Input data could not be parsed or is inconsistent."""


class CheckpointError(RuntimeError):
    """A checkpoint is corrupt, truncated, or from an incompatible version."""


class PrerequisiteError(RuntimeError):
    """A pipeline stage was run before the stage that produces its inputs."""

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage
