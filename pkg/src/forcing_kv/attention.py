"""Reference chunkwise attention, the masked-attention oracle and mass accounting."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import kernels
from .errors import ShapeError


class Region(IntEnum):
    SINK = 0
    HISTORY = 1
    TRANSITION = 2
    GENERATE = 3


@dataclass(frozen=True)
class RegionMap:
    """Region label for every token of an attention window."""

    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def for_window(cls, pre_frames: int, frames_per_chunk: int, tokens_per_frame: int, sink_frames: int) -> "RegionMap":
        """Window of ``pre_frames`` cached frames followed by one generated chunk.

        Sink takes the first frames, the transition frame is the last cached
        frame when it is not a sink frame, the remainder is history.
        """
        f = tokens_per_frame
        sink = min(sink_frames, pre_frames)
        frame_labels = [Region.SINK] * sink + [Region.HISTORY] * (pre_frames - sink)
        if pre_frames > sink:
            frame_labels[-1] = Region.TRANSITION
        frame_labels += [Region.GENERATE] * frames_per_chunk
        return cls(np.repeat(np.array(frame_labels, dtype=np.int64), f))

    def count(self, region: Region) -> int:
        return int(np.count_nonzero(self.labels == region))


@dataclass(frozen=True)
class MassBreakdown:
    a_total: float = 0.0
    a_generate: float = 0.0
    a_transition: float = 0.0
    a_sink: float = 0.0

    def __add__(self, other: "MassBreakdown") -> "MassBreakdown":
        return MassBreakdown(
            self.a_total + other.a_total,
            self.a_generate + other.a_generate,
            self.a_transition + other.a_transition,
            self.a_sink + other.a_sink,
        )

    @property
    def local_ratio(self) -> float:
        """(generate + transition) / (total - sink); NaN when nothing lies off-sink."""
        off_sink = self.a_total - self.a_sink
        if off_sink <= 0.0:
            return float("nan")
        return (self.a_generate + self.a_transition) / off_sink


def merge(masses) -> MassBreakdown:
    total = MassBreakdown()
    for m in masses:
        total = total + m
    return total


def _check_qkv(q: np.ndarray, k: np.ndarray, v: np.ndarray | None = None) -> None:
    if q.ndim != 2 or k.ndim != 2:
        raise ShapeError(f"Q and K must be 2-D, got {q.shape} and {k.shape}")
    if q.shape[0] < 1 or k.shape[0] < 1:
        raise ShapeError("Q and K need at least one row")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"head_dim mismatch: Q {q.shape}, K {k.shape}")
    if v is not None and (v.ndim != 2 or v.shape[0] != k.shape[0]):
        raise ShapeError(f"V {v.shape} does not match K {k.shape}")
    for name, a in (("Q", q), ("K", k), ("V", v)):
        if a is not None and not np.isfinite(a).all():
            raise ShapeError(f"{name} contains non-finite values")


def attend_full(q: np.ndarray, k: np.ndarray, v: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """softmax(Q K^T / sqrt(d) + bias) V, computed in double precision."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    _check_qkv(q, k, v)
    if bias is not None and len(bias) != len(k):
        raise ShapeError(f"bias has {len(bias)} entries for {len(k)} keys")
    return kernels.attend(q, k, v, bias)


def attend_masked(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, keep_mask: np.ndarray, bias: np.ndarray | None = None
) -> np.ndarray:
    """Attention restricted to ``keep_mask``; dropped keys get a -inf logit."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    _check_qkv(q, k, v)
    keep_mask = np.asarray(keep_mask, dtype=bool)
    if keep_mask.shape != (len(k),):
        raise ShapeError(f"mask shape {keep_mask.shape} does not match {len(k)} keys")
    if not keep_mask.any():
        raise ShapeError("keep mask selects no tokens")
    masked = np.where(keep_mask, 0.0, -np.inf)
    if bias is not None:
        masked = masked + np.asarray(bias, dtype=np.float64)
    return kernels.attend(q, k, v, masked)


def attention_mass(q: np.ndarray, k: np.ndarray, regions: RegionMap, bias: np.ndarray | None = None) -> MassBreakdown:
    """Post-softmax attention mass per region, summed over query rows."""
    q, k = np.asarray(q), np.asarray(k)
    _check_qkv(q, k)
    if len(regions) != len(k):
        raise ShapeError(f"region map covers {len(regions)} tokens, window has {len(k)}")
    mass = kernels.region_mass(q, k, regions.labels, len(Region), bias)
    return MassBreakdown(
        a_total=float(mass.sum()),
        a_generate=float(mass[Region.GENERATE]),
        a_transition=float(mass[Region.TRANSITION]),
        a_sink=float(mass[Region.SINK]),
    )
