"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures to the
documented process status without a lookup table.
"""

from __future__ import annotations


class LatentForgeError(Exception):
    exit_code = 3


class UsageError(LatentForgeError):
    exit_code = 2


class ConfigError(UsageError):
    pass


class DataError(LatentForgeError):
    exit_code = 3


class MissingFile(DataError):
    pass


class UnsupportedFormat(DataError):
    pass


class TooSmall(DataError):
    pass


class WriteFailure(DataError):
    pass


class ShapeError(DataError):
    pass


class ShapeMismatch(ShapeError):
    pass


class ChannelMismatch(ShapeError):
    pass


class StageMismatch(ShapeError):
    pass


class EmptyMap(DataError):
    pass


class EmptyInput(DataError):
    pass


class AlphaOutOfRange(DataError):
    pass


class NegativeLoss(DataError):
    pass


class SourceTooSmall(DataError):
    pass


class UnknownBackground(DataError):
    pass


class EmptyBackgroundLibrary(DataError):
    pass


class InsufficientClasses(DataError):
    pass


class NoMatedPairs(DataError):
    pass


class MissingMate(DataError):
    pass


class LayoutError(DataError):
    pass


class TooFewPoints(DataError):
    pass


class BadPerplexity(DataError):
    pass


class TrainingDiverged(DataError):
    """Raised when a loss turns non-finite; ``batch`` holds the offending pairs."""

    def __init__(self, message: str, batch=None):
        super().__init__(message)
        self.batch = batch


class ToolError(LatentForgeError):
    exit_code = 4


class ToolUnavailable(ToolError):
    pass


class ToolParseError(ToolError):
    pass
