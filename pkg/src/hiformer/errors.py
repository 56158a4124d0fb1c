"""Exception hierarchy shared by every module.

The CLI maps each family onto a process exit code, so new errors should
subclass one of the three families below.
"""


class HiformerError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(HiformerError):
    """Invalid configuration, shapes, or flags."""

    exit_code = 2


class DimensionError(ConfigError):
    """Tensor extents do not line up for an operation."""


class UsageError(ConfigError):
    """An API was called in an unsupported way (e.g. backward on a leaf)."""


class DataError(HiformerError):
    """Input data does not conform to the schema or is empty."""

    exit_code = 3


class VocabularyError(DataError):
    """Categorical id outside its declared vocabulary."""


class VersionError(DataError):
    """Checkpoint written by an incompatible format version or config."""


class NumericError(HiformerError):
    """NaN or Inf produced during computation or training."""

    exit_code = 4
