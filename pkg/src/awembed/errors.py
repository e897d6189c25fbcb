"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """An input's dimensions do not satisfy an operation's contract."""


class DegenerateVectorError(ValueError):
    """A zero-norm vector was passed where cosine geometry is required."""


class ConfigError(ValueError):
    """A configuration value or key violates the schema."""


class DataError(ValueError):
    """A corpus-level constraint is violated (empty corpus, single class, ...)."""


class ArchiveError(ValueError):
    """A segment archive failed to parse or verify.

    ``offset`` is the byte offset at which parsing failed, when known;
    ``segment`` the index of the offending segment, when known.
    """

    def __init__(self, message, offset=None, segment=None):
        detail = message
        if offset is not None:
            detail += f" (byte offset {offset})"
        if segment is not None:
            detail += f" (segment {segment})"
        super().__init__(detail)
        self.offset = offset
        self.segment = segment


class CheckpointError(ValueError):
    """A checkpoint file failed to parse or verify."""


class GradCheckError(RuntimeError):
    """A gradient check could not be completed (non-finite loss)."""

    def __init__(self, message, coordinate=None):
        if coordinate is not None:
            message += f" (coordinate {coordinate})"
        super().__init__(message)
        self.coordinate = coordinate


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class UndefinedApError(ValueError):
    """Average precision is undefined (no positive pairs in the set)."""
