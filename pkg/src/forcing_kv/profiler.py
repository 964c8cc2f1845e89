"""Offline head profiling and head-feature stability statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np

from .attention import MassBreakdown, RegionMap, attention_mass
from .config import DEFAULT_ALPHA, StreamConfig
from .errors import ConfigError, ProfilingError
from .kernels import region_mass

HeadKey = tuple[int, int]


class HeadType(str, Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


@dataclass(frozen=True)
class HeadEntry:
    type: HeadType
    ratio: float


@dataclass(frozen=True)
class HeadTypeMap:
    alpha: float
    entries: Mapping[HeadKey, HeadEntry]

    def __getitem__(self, key: HeadKey) -> HeadType:
        try:
            return self.entries[key].type
        except KeyError:
            raise ConfigError(f"head-type map has no entry for layer {key[0]}, head {key[1]}") from None

    def is_static(self, layer: int, head: int) -> bool:
        return self[(layer, head)] is HeadType.STATIC

    def count(self, kind: HeadType) -> int:
        return sum(1 for e in self.entries.values() if e.type is kind)

    def labels(self) -> dict[HeadKey, str]:
        return {k: e.type.value for k, e in self.entries.items()}

    def check_covers(self, config: StreamConfig) -> None:
        missing = [k for k in config.heads if k not in self.entries]
        if missing:
            raise ConfigError(f"head-type map is missing heads {missing}")

    @classmethod
    def uniform(cls, config: StreamConfig, kind: HeadType, alpha: float = DEFAULT_ALPHA) -> "HeadTypeMap":
        ratio = 1.0 if kind is HeadType.STATIC else 0.0
        return cls(alpha, {k: HeadEntry(kind, ratio) for k in config.heads})

    @classmethod
    def from_labels(cls, labels: Mapping[HeadKey, str], alpha: float = DEFAULT_ALPHA) -> "HeadTypeMap":
        return cls(
            alpha,
            {k: HeadEntry(HeadType(v), 1.0 if v == "static" else 0.0) for k, v in labels.items()},
        )

    def to_json(self) -> str:
        heads = [
            {"layer": l, "head": h, "ratio": round(e.ratio, 12), "type": e.type.value}
            for (l, h), e in sorted(self.entries.items())
        ]
        return json.dumps({"alpha": self.alpha, "heads": heads}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "HeadTypeMap":
        try:
            data = json.loads(text)
            entries = {
                (int(item["layer"]), int(item["head"])): HeadEntry(HeadType(item["type"]), float(item["ratio"]))
                for item in data["heads"]
            }
            return cls(float(data["alpha"]), entries)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed head-type map: {exc}") from None


def profile_heads(accumulated: Mapping[HeadKey, MassBreakdown], alpha: float = DEFAULT_ALPHA) -> HeadTypeMap:
    """Static iff (generate + transition) / (total - sink) > alpha, strictly."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie strictly inside (0, 1), got {alpha!r}")
    entries = {}
    for (layer, head), mass in sorted(accumulated.items()):
        off_sink = mass.a_total - mass.a_sink
        if not off_sink > 0.0:
            raise ProfilingError(
                f"layer {layer}, head {head}: no attention mass outside sink frames", layer, head
            )
        ratio = (mass.a_generate + mass.a_transition) / off_sink
        kind = HeadType.STATIC if ratio > alpha else HeadType.DYNAMIC
        entries[(layer, head)] = HeadEntry(kind, ratio)
    return HeadTypeMap(alpha, entries)


def profiling_steps(config: StreamConfig) -> list[int]:
    """AR steps whose window has a non-sink transition frame (never step 0)."""
    return [
        i for i in range(1, config.ar_steps) if i * config.frames_per_chunk > config.sink_frames
    ]


def accumulate_masses(source, steps: Iterable[int] | None = None) -> dict[HeadKey, MassBreakdown]:
    """Sum region masses per head over AR steps and all denoising steps."""
    cfg: StreamConfig = source.config
    steps = profiling_steps(cfg) if steps is None else list(steps)
    totals = {key: MassBreakdown() for key in cfg.heads}
    for i in steps:
        regions = RegionMap.for_window(
            i * cfg.frames_per_chunk, cfg.frames_per_chunk, cfg.tokens_per_frame, cfg.sink_frames
        )
        for d in range(cfg.denoise_steps):
            q = source.chunk(i, d)[0]
            k, _ = source.window_kv(i, d)
            for l, h in cfg.heads:
                bias = source.key_bias(l, h, regions)
                totals[(l, h)] = totals[(l, h)] + attention_mass(q[l, h], k[l, h], regions, bias)
    return totals


def frame_features(source, ar_step: int) -> dict[tuple[int, int, int], np.ndarray]:
    """Normalized attention mass per non-sink history frame.

    Keyed by ``(layer, head, denoise_step)``; vector length is the number of
    non-sink frames before the chunk of ``ar_step``.
    """
    cfg: StreamConfig = source.config
    pre = ar_step * cfg.frames_per_chunk
    sink = min(cfg.sink_frames, pre)
    if pre - sink < 1:
        raise ConfigError(f"AR step {ar_step} has no non-sink history frames")
    regions = RegionMap.for_window(pre, cfg.frames_per_chunk, cfg.tokens_per_frame, cfg.sink_frames)
    f = cfg.tokens_per_frame
    # One label per frame; the generated chunk is one extra bucket.
    frame_ids = np.minimum(np.arange(len(regions)) // f, pre)
    out = {}
    for d in range(cfg.denoise_steps):
        q = source.chunk(ar_step, d)[0]
        k, _ = source.window_kv(ar_step, d)
        for l, h in cfg.heads:
            mass = region_mass(q[l, h], k[l, h], frame_ids, pre + 1, source.key_bias(l, h, regions))
            hist = mass[sink:pre]
            out[(l, h, d)] = hist / hist.sum()
    return out


def _divergence_matrix(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0.0):
        raise ConfigError("zero-norm feature vector")
    unit = vectors / norms[:, None]
    return 1.0 - unit @ unit.T


def divergence_stats(features: Mapping[object, Sequence[np.ndarray]]) -> tuple[float, float]:
    """(intra, inter) mean divergence, divergence being 1 - cosine similarity.

    ``features`` maps a head to its sample vectors. Intra averages each head's
    mean pairwise divergence; inter averages over all cross-head pairs.
    """
    heads = list(features)
    if len(heads) < 2:
        raise ConfigError("divergence statistics need at least two heads")
    vectors, owner = [], []
    for n, key in enumerate(heads):
        samples = list(features[key])
        if len(samples) < 2:
            raise ConfigError(f"head {key!r} has fewer than two samples")
        vectors.extend(np.asarray(s, dtype=np.float64) for s in samples)
        owner.extend([n] * len(samples))
    dist = _divergence_matrix(np.stack(vectors))
    owner = np.array(owner)
    intra = []
    for n in range(len(heads)):
        idx = np.flatnonzero(owner == n)
        intra.append(np.mean([dist[a, b] for a, b in combinations(idx, 2)]))
    cross = owner[:, None] != owner[None, :]
    return float(np.mean(intra)), float(dist[cross].mean())
