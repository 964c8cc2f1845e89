"""Exception types shared across the package."""

from __future__ import annotations


class ForcingKVError(Exception):
    """Base class for every error raised by forcing_kv."""


class ConfigError(ForcingKVError, ValueError):
    """Invalid stream geometry, hyperparameter or policy specification."""


class ShapeError(ForcingKVError, ValueError):
    """Tensor shapes disagree with each other or with the stream geometry."""


class FormatError(ForcingKVError):
    """Malformed trace file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ProfilingError(ForcingKVError):
    """A head cannot be classified, e.g. all of its mass sits on sink frames."""

    def __init__(self, message: str, layer: int | None = None, head: int | None = None):
        super().__init__(message)
        self.layer = layer
        self.head = head


class MetricError(ForcingKVError, ValueError):
    """A metric is undefined for its input (e.g. an all-zero delta series)."""


class VerificationError(ForcingKVError):
    """Compressed attention disagrees with the masked-attention oracle."""
