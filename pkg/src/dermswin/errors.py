"""Exception types shared across the package.

The CLI maps these onto process exit codes, so anything user-facing should
raise one of them rather than a bare ValueError.
"""


class ConfigError(Exception):
    """Invalid or missing configuration (bad key, bad value, missing root)."""


class DataError(Exception):
    """Dataset problems: unreadable images, empty classes, empty splits."""


class NumericError(Exception):
    """Non-finite values where finite ones are required (e.g. NaN loss)."""


class UndefinedMetricError(Exception):
    """A metric's denominator is empty (no positives, single-class input)."""


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """File is not a checkpoint (bad magic) or is structurally malformed."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unsupported format version."""


class CheckpointIntegrityError(CheckpointError):
    """Integrity hash mismatch: the file is truncated or corrupted."""


class CheckpointShapeError(CheckpointError):
    """Stored tensors disagree with the checkpoint's own embedded config."""


class CheckpointIncompatibleError(CheckpointError):
    """Checkpoint config does not match the config the caller expects."""
