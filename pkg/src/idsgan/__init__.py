"""CNN-with-attention intrusion detection with GAN-based augmentation."""

from .errors import CheckpointError, DataError, PrerequisiteError, ShapeError, UsageError

__version__ = "0.1.0"

__all__ = ["CheckpointError", "DataError", "PrerequisiteError", "ShapeError", "UsageError"]
