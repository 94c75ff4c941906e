"""Exception hierarchy shared across the package.

The CLI maps each family onto a distinct exit code (see ``vcmr.cli``).
"""


class VCMRError(Exception):
    """Base class for all package errors."""


class ConfigError(VCMRError, ValueError):
    """Unknown key, bad type or inconsistent configuration."""


class InvalidInputError(VCMRError, ValueError):
    """An argument violates an operation's precondition."""


class ShapeError(InvalidInputError):
    """Tensor or waveform has the wrong length/shape."""


class OutOfRangeError(InvalidInputError, IndexError):
    """A requested slice lies outside the available data."""


class DataError(VCMRError):
    """Corpus, manifest or feature-cache problem."""


class DecodeError(DataError, OSError):
    """Audio file could not be decoded."""

    def __init__(self, path, reason):
        super().__init__(f"cannot decode audio {path!s}: {reason}")
        self.path = str(path)


class AlignmentError(DataError):
    """Audio and video items of a multimodal batch do not belong together."""


class CheckpointError(VCMRError):
    """Corrupt checkpoint (checksum/format)."""


class SchemaVersionError(CheckpointError):
    """File written with an unsupported schema version."""


class MissingArtifactError(VCMRError):
    """A prerequisite produced by another pipeline step is absent."""


class NumericError(VCMRError, ArithmeticError):
    """Non-finite values encountered in a loss or embedding."""
