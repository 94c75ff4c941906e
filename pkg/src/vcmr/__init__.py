"""Video-conditioned contrastive pre-training for raw-waveform music tagging."""

from .errors import (
    AlignmentError,
    CheckpointError,
    ConfigError,
    DataError,
    DecodeError,
    InvalidInputError,
    MissingArtifactError,
    NumericError,
    OutOfRangeError,
    SchemaVersionError,
    ShapeError,
    VCMRError,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "DecodeError",
    "InvalidInputError",
    "MissingArtifactError",
    "NumericError",
    "OutOfRangeError",
    "SchemaVersionError",
    "ShapeError",
    "VCMRError",
    "__version__",
]
