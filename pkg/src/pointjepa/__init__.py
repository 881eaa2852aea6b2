"""Point-JEPA: joint-embedding predictive pretraining for point clouds at desk scale."""

from pointjepa.errors import (
    CheckpointError,
    ConfigError,
    FormatError,
    InvalidArgument,
    ModelMismatch,
    NumericFailure,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "FormatError",
    "InvalidArgument",
    "ModelMismatch",
    "NumericFailure",
]
