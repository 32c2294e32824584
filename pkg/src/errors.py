"""Exception hierarchy shared by the pipeline, the CLI and the HTTP API."""

from typing import Optional


class HalsieError(Exception):
    """Base class for every error raised by the pipeline."""

    exit_code = 3


class ParseError(HalsieError):
    """Malformed event CSV, image or config text."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"{message} at line {line}"
        super().__init__(message)


class ConfigError(HalsieError):
    """Configuration value outside its valid range."""


class ShapeError(HalsieError):
    """Tensor or geometry mismatch."""


class LabelError(HalsieError):
    """Target class id outside [0, K) that is not the ignore id."""


class UsageError(HalsieError):
    """Invalid invocation (bad flag combination, non-scalar backward root)."""

    exit_code = 1


class CheckpointError(HalsieError):
    """Missing, truncated or foreign checkpoint/volume file."""

    exit_code = 2
