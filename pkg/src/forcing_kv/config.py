"""Stream geometry, compression hyperparameters and the planted-stream recipe."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any

from .errors import ConfigError

DEFAULT_ALPHA = 0.8
DEFAULT_RATIO = 0.3
DEFAULT_SEGMENTS = 6


def _positive(name: str, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
        raise ConfigError(f"{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class StreamConfig:
    """Static geometry of a chunkwise autoregressive stream.

    One AR step generates ``frames_per_chunk`` latent frames of
    ``tokens_per_frame`` tokens each. ``sink_frames`` frames at the start of
    the stream are pinned in the cache; every frame is split into
    ``segments_per_frame`` contiguous segments for dynamic pruning.
    """

    layers: int
    heads_per_layer: int
    head_dim: int
    frames_per_chunk: int
    tokens_per_frame: int
    segments_per_frame: int = DEFAULT_SEGMENTS
    sink_frames: int = 1
    alpha: float = DEFAULT_ALPHA
    ratio: float = DEFAULT_RATIO
    ar_steps: int = 4
    denoise_steps: int = 4
    # Alternative reading of the keep rule: keep floor(r*n) instead of floor((1-r)*n).
    bottomk_formula: bool = False

    def __post_init__(self) -> None:
        for name in (
            "layers",
            "heads_per_layer",
            "head_dim",
            "frames_per_chunk",
            "tokens_per_frame",
            "segments_per_frame",
            "ar_steps",
            "denoise_steps",
        ):
            _positive(name, getattr(self, name))
        if isinstance(self.sink_frames, bool) or not isinstance(self.sink_frames, int) or self.sink_frames < 0:
            raise ConfigError(f"sink_frames must be a non-negative integer, got {self.sink_frames!r}")
        if self.segments_per_frame > self.tokens_per_frame:
            raise ConfigError(
                f"segments_per_frame ({self.segments_per_frame}) exceeds tokens_per_frame ({self.tokens_per_frame})"
            )
        if not (0.0 < float(self.alpha) < 1.0):
            raise ConfigError(f"alpha must lie strictly inside (0, 1), got {self.alpha!r}")
        if not (0.0 <= float(self.ratio) <= 1.0):
            raise ConfigError(f"ratio must lie inside [0, 1], got {self.ratio!r}")

    @property
    def chunk_tokens(self) -> int:
        return self.frames_per_chunk * self.tokens_per_frame

    @property
    def total_frames(self) -> int:
        return self.ar_steps * self.frames_per_chunk

    @property
    def heads(self) -> list[tuple[int, int]]:
        return [(l, h) for l in range(self.layers) for h in range(self.heads_per_layer)]

    def segment_bounds(self) -> list[int]:
        return segment_bounds(self.tokens_per_frame, self.segments_per_frame)

    def keep_count(self) -> int:
        return keep_count(self.ratio, self.segments_per_frame, formula=self.bottomk_formula)

    def replace(self, **changes: Any) -> "StreamConfig":
        data = asdict(self)
        data.update(changes)
        return StreamConfig(**data)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StreamConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown stream config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class PlantedStreamSpec:
    """Recipe for a synthetic stream with known head roles and segment similarity.

    ``segment_rho[j]`` is the frame-to-frame correlation of segment ``j`` keys.
    Planted static heads get ``static_logit_bias`` added to the logits of the
    current chunk and the transition frame.
    """

    seed: int = 0
    static_head_fraction: float = 0.4
    segment_rho: tuple[float, ...] = ()
    static_logit_bias: float = 6.0
    # Bias on distant history for planted dynamic heads; 0 leaves them content-driven.
    dynamic_history_bias: float = 1.0

    def __post_init__(self) -> None:
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or not (0 <= self.seed < 2**64):
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")
        if not (0.0 <= float(self.static_head_fraction) <= 1.0):
            raise ConfigError(f"static_head_fraction must lie in [0, 1], got {self.static_head_fraction!r}")
        object.__setattr__(self, "segment_rho", tuple(float(x) for x in self.segment_rho))
        for j, rho in enumerate(self.segment_rho):
            if not (0.0 <= rho <= 1.0) or math.isnan(rho):
                raise ConfigError(f"segment_rho[{j}] = {rho!r} lies outside [0, 1]")
        if self.static_logit_bias < 0 or not math.isfinite(self.static_logit_bias):
            raise ConfigError(f"static_logit_bias must be finite and non-negative, got {self.static_logit_bias!r}")
        if not math.isfinite(self.dynamic_history_bias):
            raise ConfigError("dynamic_history_bias must be finite")

    def rho_for(self, config: StreamConfig) -> tuple[float, ...]:
        n = config.segments_per_frame
        if not self.segment_rho:
            # Spread correlations so segments differ in redundancy.
            return tuple(0.95 - 0.9 * j / max(n - 1, 1) for j in range(n))
        if len(self.segment_rho) != n:
            raise ConfigError(f"segment_rho has {len(self.segment_rho)} entries, expected {n}")
        return self.segment_rho

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PlantedStreamSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown planted spec keys: {sorted(unknown)}")
        data = dict(data)
        if "segment_rho" in data:
            data["segment_rho"] = tuple(data["segment_rho"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def segment_bounds(tokens_per_frame: int, segments: int) -> list[int]:
    """Token offsets ``[0, b1, ..., F]`` of the contiguous segments of a frame.

    The first ``F mod n`` segments are one token longer than the rest.
    """
    if segments <= 0 or segments > tokens_per_frame:
        raise ConfigError(f"cannot split {tokens_per_frame} tokens into {segments} segments")
    base, extra = divmod(tokens_per_frame, segments)
    bounds = [0]
    for j in range(segments):
        bounds.append(bounds[-1] + base + (1 if j < extra else 0))
    return bounds


def keep_count(ratio: float, segments: int, formula: bool = False) -> int:
    """Number of segments kept per scored frame.

    Default keeps ``floor((1 - r) * n)``; ``formula=True`` keeps ``floor(r * n)``.
    """
    if not (0.0 <= ratio <= 1.0):
        raise ConfigError(f"ratio must lie inside [0, 1], got {ratio!r}")
    share = ratio if formula else 1.0 - ratio
    # 1e-9 absorbs binary rounding such as (1 - 0.3) * 10 = 6.999...
    return min(segments, int(math.floor(share * segments + 1e-9)))


@dataclass(frozen=True)
class RunConfig:
    """Stream geometry plus planted recipe, as read from a JSON config file."""

    stream: StreamConfig
    planted: PlantedStreamSpec = field(default_factory=PlantedStreamSpec)

    def to_dict(self) -> dict[str, Any]:
        planted = asdict(self.planted)
        planted["segment_rho"] = list(self.planted.segment_rho)
        return {"stream": asdict(self.stream), "planted": planted}

    def digest(self) -> str:
        return config_digest(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        if "stream" not in data:
            raise ConfigError("config must contain a 'stream' object")
        stream = StreamConfig.from_dict(data["stream"])
        planted = PlantedStreamSpec.from_dict(data.get("planted", {}))
        return cls(stream, planted)

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)


def config_digest(data: dict[str, Any]) -> str:
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
