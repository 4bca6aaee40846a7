"""Exception types raised across the toolkit.

Everything is a thin subclass so callers can catch by family
(ValueError / RuntimeError) or by exact kind.
"""


class OddRegionError(ValueError):
    """Mosaic region has an odd side and cannot be split into equal quadrants."""


class OutOfBoundsError(ValueError):
    """Mosaic region does not lie within the image."""


class IndivisibleImageError(ValueError):
    """Image side not divisible by 2**r."""


class RecursionDepthError(ValueError):
    """Recursion count above the safe limit without an explicit override."""


class IncompatibleTraceError(ValueError):
    """Recorded mosaic trace does not fit the given image."""


class EmptyProfileError(ValueError):
    """Layer channel profile is empty."""


class ShapeMismatchError(ValueError):
    """Input shape does not match what the backbone expects."""


class ChannelMismatchError(ValueError):
    """Feature map channel count does not match the stage's expected count."""


class ArityMismatchError(ValueError):
    """Wrong number of stage vectors."""


class LengthMismatchError(ValueError):
    """Vector lengths disagree."""


class UnknownStageError(ValueError):
    """Stage index outside the interacting set."""


class InvalidStageNumError(ValueError):
    """Interacting stage count outside [1, N]."""


class EmptyBatchError(ValueError):
    """Training batch contains no samples."""


class NonFiniteLossError(RuntimeError):
    """Loss became NaN/inf; training aborts with diagnostics."""


class DatasetEmptyError(ValueError):
    """Dataset yields no samples."""


class ResumeMismatchError(ValueError):
    """Checkpoint config incompatible with the requested run."""


class CorruptCheckpointError(ValueError):
    """Checkpoint file truncated or malformed."""


class VersionMismatchError(ValueError):
    """Checkpoint written by an incompatible format version."""


class MissingRootError(FileNotFoundError):
    """Dataset root directory does not exist."""


class NoClassesError(ValueError):
    """Dataset root contains no class subdirectories."""


class UnreadableImageError(ValueError):
    """A listed image file cannot be read (path included in the message)."""


class DecodeError(ValueError):
    """Image bytes could not be decoded."""


class BadSizeError(ValueError):
    """Synthetic image size incompatible with the mosaic depth."""


class UnknownKindError(ValueError):
    """Unrecognized corruption kind."""


class InvalidComboError(ValueError):
    """Invalid ablation toggle combination (mosaic requires progressive phases)."""
