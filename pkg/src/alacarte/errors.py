"""Exception hierarchy shared across the package.

The CLI maps these to exit codes: ConfigError -> 2, DataError (and
subclasses) -> 3, PoolError (and subclasses) -> 4.
"""


class AlacarteError(Exception):
    """Base class for all package errors."""


class ConfigError(AlacarteError):
    """Invalid configuration value or file."""


class ShapeError(ConfigError):
    """Tensor dimensions incompatible with the requested operation."""


class MaskError(ConfigError):
    """Attention mask leaves a query row with no attendable key."""


class NumericError(AlacarteError):
    """NaN or non-finite value where a finite one is required."""


class LabelError(AlacarteError):
    """Class label outside the valid range."""


class DataError(AlacarteError):
    """Dataset missing, empty, or malformed."""


class FormatError(DataError):
    """Binary file does not match the expected record layout."""


class PartitionError(DataError):
    """Requested split is impossible for this dataset."""


class PoolError(AlacarteError):
    """Prompt pool integrity problem."""


class CompositionError(PoolError):
    """Sources cannot be combined (duplicate ids, incompatible label maps)."""


class StalePromptError(PoolError):
    """Prompt set was trained against a different backbone fingerprint."""


class SourceNotFoundError(PoolError):
    """Requested source id is not in the pool."""


class SelectionError(PoolError):
    """Empty or otherwise unusable source selection."""
