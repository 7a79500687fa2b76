"""Exception types shared across the package."""


class AutovRankError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AutovRankError, ValueError):
    """Operands have incompatible or invalid dimensions."""


class DegenerateInputError(AutovRankError, ValueError):
    """Input is numerically unusable (zero vector, empty pool, ...)."""


class FormatError(AutovRankError, ValueError):
    """A serialized tensor, checkpoint, or header is malformed."""


class ValidationError(AutovRankError, ValueError):
    """A record field holds an out-of-contract value."""


class DatasetParseError(AutovRankError, ValueError):
    """A dataset line is not parseable; message carries the line number."""


class MissingBlobError(AutovRankError, FileNotFoundError):
    """A dataset record references a tensor blob that does not exist."""


class IncompleteGroupError(AutovRankError, ValueError):
    """A candidate group lacks the losses needed for ranking."""


class EmptyGroupError(AutovRankError, ValueError):
    """An operation received an empty candidate collection."""


class DegenerateGroupError(AutovRankError, ValueError):
    """A group is too small to expand into preference pairs."""


class StateError(AutovRankError, RuntimeError):
    """Objects passed together do not belong together (tape/param mismatch, untrained selector, ...)."""


class DegenerateStatisticsError(AutovRankError, ValueError):
    """A statistic is undefined for the given sample (zero variance, ...)."""


class TrainingDivergedError(AutovRankError, RuntimeError):
    """A non-finite loss or gradient appeared during optimization."""


class UsageError(AutovRankError, ValueError):
    """Bad command-line or config-file input."""
