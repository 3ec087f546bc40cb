from __future__ import annotations

from pathlib import Path


class StrataError(Exception):
    """Base class for every error raised by the pipeline."""


class ConfigurationError(StrataError):
    pass


class EmptyInputError(StrataError):
    pass


class PreconditionError(StrataError):
    pass


class IntegrityError(StrataError):
    pass


class WeightFormatError(ConfigurationError):
    pass


class SequenceFormatError(StrataError):
    def __init__(self, path: str | Path, offset: int, reason: str) -> None:
        self.path = str(path)
        self.offset = offset
        self.reason = reason
        super().__init__(f"{self.path}: byte {offset}: {reason}")


class SequenceGapError(StrataError):
    def __init__(self, index: int) -> None:
        self.index = index
        super().__init__(f"frame {index:05d} is missing from the sequence")


class CapacityError(StrataError):
    def __init__(self, placed: int, requested: int, retries: int) -> None:
        self.placed = placed
        self.requested = requested
        self.retries = retries
        super().__init__(f"placed {placed} of {requested} objects after {retries} retries")


class FrameProcessingError(StrataError):
    def __init__(self, frame_index: int, cause: Exception) -> None:
        self.frame_index = frame_index
        self.cause = cause
        super().__init__(f"frame {frame_index}: {cause}")
