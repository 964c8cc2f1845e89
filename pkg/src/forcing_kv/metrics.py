"""Chunk discontinuity, attention cost model, cache memory and retention accounting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .config import StreamConfig, keep_count
from .errors import MetricError, ShapeError


@dataclass(frozen=True)
class FlowDiffSeries:
    """Adjacent-frame flow differences of a video generated in ``chunks`` chunks."""

    deltas: tuple[float, ...]
    chunks: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "deltas", tuple(float(x) for x in self.deltas))
        if len(self.deltas) < 1:
            raise MetricError("delta series is empty")
        if any(not math.isfinite(x) or x < 0 for x in self.deltas):
            raise MetricError("deltas must be finite and non-negative")
        if self.chunks < 2:
            raise MetricError(f"chunk discontinuity needs at least 2 chunks, got {self.chunks}")
        if self.chunks - 1 > len(self.deltas):
            raise MetricError(f"{self.chunks} chunks need at least {self.chunks - 1} deltas, got {len(self.deltas)}")

    @property
    def frames_total(self) -> int:
        return len(self.deltas) + 1


def chunk_discontinuity(series: FlowDiffSeries) -> float:
    """Mean of the K-1 largest deltas divided by the mean of all deltas.

    Evaluated in exact rationals and rounded once, so a constant series gives 1.0.
    """
    deltas = sorted((Fraction(x) for x in series.deltas), reverse=True)
    total = sum(deltas)
    if total == 0:
        raise MetricError("chunk discontinuity is undefined for an all-zero delta series")
    top = sum(deltas[: series.chunks - 1])
    return float(top * len(deltas) / ((series.chunks - 1) * total))


def naive_flow_diff(frames: Sequence[np.ndarray], chunks: int) -> FlowDiffSeries:
    """Mean absolute pixel difference between consecutive frames.

    Stand-in for an optical-flow network; any provider producing a
    ``FlowDiffSeries`` can be used instead.
    """
    if len(frames) < 2:
        raise ShapeError("need at least two frames")
    arrays = [np.asarray(f, dtype=np.float64) for f in frames]
    shape = arrays[0].shape
    for n, a in enumerate(arrays):
        if a.shape != shape:
            raise ShapeError(f"frame {n} has shape {a.shape}, expected {shape}")
    deltas = [float(np.mean(np.abs(b - a))) for a, b in zip(arrays, arrays[1:])]
    return FlowDiffSeries(tuple(deltas), chunks)


def read_deltas_csv(path: str, chunks: int) -> FlowDiffSeries:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != ["t", "delta"]:
            raise MetricError(f"{path}: expected header 't,delta'")
        rows = [(int(r["t"]), float(r["delta"])) for r in reader]
    rows.sort()
    return FlowDiffSeries(tuple(d for _, d in rows), chunks)


def write_deltas_csv(path: str, series: FlowDiffSeries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "delta"])
        for t, d in enumerate(series.deltas, start=1):
            writer.writerow([t, repr(d)])


def attention_flops(lq: int, lk: int, d: int) -> int:
    """FLOPs of one head's attention: QK^T plus AV, 2 FLOPs per multiply-add."""
    if lq <= 0 or lk <= 0 or d <= 0:
        raise ValueError("attention dims must be positive")
    return 4 * lq * lk * d


@dataclass
class CostRecord:
    """Attention cost of one AR/denoising step, compressed and full-cache."""

    ar_step: int
    denoise_step: int
    attended_tokens: int
    full_tokens: int
    flops: int
    flops_full: int
    cache_bytes: int
    cache_bytes_full: int
    extra: dict = field(default_factory=dict)


def speedup(full: Sequence[CostRecord] | CostRecord, compressed: Sequence[CostRecord] | CostRecord, overhead_flops: float = 0.0) -> float:
    """Modeled speedup: total full FLOPs over total compressed FLOPs.

    ``overhead_flops`` is a per-record non-attention cost added to both sides.
    """
    full = [full] if isinstance(full, CostRecord) else list(full)
    compressed = [compressed] if isinstance(compressed, CostRecord) else list(compressed)
    num = sum(r.flops for r in full) + overhead_flops * len(full)
    den = sum(r.flops for r in compressed) + overhead_flops * len(compressed)
    if den <= 0:
        raise MetricError("compressed FLOPs are zero")
    return num / den


def cache_memory_bytes(state_or_config, tokens_per_head: int | None = None, bytes_per_element: int = 4) -> int:
    """2 (K and V) x stored tokens x head_dim x bytes per element.

    Given a ``CacheState``, uses its stored tokens summed over heads. Given a
    ``StreamConfig``, ``tokens_per_head`` is multiplied by heads and layers.
    """
    if isinstance(state_or_config, StreamConfig):
        cfg = state_or_config
        if tokens_per_head is None:
            raise ValueError("tokens_per_head is required with a StreamConfig")
        tokens = tokens_per_head * cfg.heads_per_layer * cfg.layers
    else:
        cfg = state_or_config.config
        tokens = state_or_config.tokens_stored
    return 2 * tokens * cfg.head_dim * bytes_per_element


def reduction_ratio(compressed: float, full: float) -> float:
    return 1.0 - compressed / full


# -- closed-form retention ----------------------------------------------------


def kept_tokens_per_scored_frame(config: StreamConfig) -> float:
    """Tokens kept from a scored frame, averaged over which segments are kept.

    Exact when ``F`` is divisible by ``n``; otherwise off by under one token.
    """
    k = config.keep_count()
    return k * config.tokens_per_frame / config.segments_per_frame


def predicted_attended_tokens(config: StreamConfig, ar_step: int, n_static: int, n_dynamic: int, policy: str = "forcing") -> float:
    """Attended tokens summed over heads at ``ar_step`` under ForcingKV (or full)."""
    f, c = config.tokens_per_frame, config.frames_per_chunk
    committed = ar_step * c
    sink = min(config.sink_frames, committed)
    hist = committed - sink
    full = committed * f + c * f
    if policy == "full":
        return float(full * (n_static + n_dynamic))
    newest = f if hist >= 1 else 0
    static = sink * f + newest + c * f
    dynamic = sink * f + max(hist - 1, 0) * kept_tokens_per_scored_frame(config) + newest + c * f
    return float(n_static * static + n_dynamic * dynamic)


def asymptotic_attended_fraction(dynamic_fraction: float, ratio: float, segments: int, formula: bool = False) -> float:
    """Limit of the attended fraction as history grows without bound."""
    return dynamic_fraction * keep_count(ratio, segments, formula=formula) / segments


def asymptotic_memory_reduction(dynamic_fraction: float, ratio: float, segments: int, formula: bool = False) -> float:
    return 1.0 - asymptotic_attended_fraction(dynamic_fraction, ratio, segments, formula)
