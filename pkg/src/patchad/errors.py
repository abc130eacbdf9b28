"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes, so new failure modes should
subclass the matching category rather than raising bare ValueError.
"""


class PatchadError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(PatchadError):
    """Invalid configuration value or inconsistent option combination."""


class ShapeError(ConfigError):
    """Array arguments whose shapes do not conform to the operation."""


class DataError(PatchadError):
    """Dataset content violates its contract (labels, splits, resolution)."""


class ManifestError(DataError):
    """Manifest file is missing, malformed, or references absent frames."""


class LabelError(DataError):
    """Frame label not allowed for its split, or unknown label name."""


class FrameFormatError(DataError):
    """Image file failed to decode or does not match the manifest contract."""


class NumericError(PatchadError):
    """Non-finite value where the numeric contract requires finiteness."""


class StorageError(PatchadError):
    """I/O level failure while reading or writing an artifact."""


class CheckpointFormatError(StorageError):
    """File is not a model checkpoint (bad magic bytes or structure)."""


class CheckpointVersionError(StorageError):
    """Checkpoint format version is not supported by this build."""


class CheckpointIntegrityError(StorageError):
    """Checkpoint is truncated or its checksum does not match."""
