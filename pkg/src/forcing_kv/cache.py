"""Hybrid KV cache: per-head storage, segment scoring, eviction and baselines.

Frames are numbered from the start of the stream. The first ``sink_frames``
frames go to a pinned sink store; later frames become history slots. Static
heads keep only the newest history frame (the transition frame). Dynamic heads
keep, for every history frame whose successor is cached, the segments that
changed most between the two frames. Keep-sets are computed once per frame
from layer-0 keys concatenated over heads and shared by every layer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import kernels
from .attention import attend_full
from .config import StreamConfig, keep_count, segment_bounds
from .errors import ConfigError, ShapeError
from .profiler import HeadType, HeadTypeMap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FullKV:
    label = "full"


@dataclass(frozen=True)
class ForcingKV:
    label = "forcing"


@dataclass(frozen=True)
class StreamingSinkRecent:
    sink_frames: int = 3
    recent_frames: int = 4

    def __post_init__(self) -> None:
        if self.sink_frames < 0 or self.recent_frames < 0:
            raise ConfigError("streaming policy frame counts must be non-negative")

    @property
    def label(self) -> str:
        return f"streaming:{self.sink_frames}:{self.recent_frames}"


@dataclass(frozen=True)
class DummyLocal:
    """Local heads keep sink + chunk; neighbor heads add the last L history frames.

    Static heads of the head-type map stand in for local heads.
    """

    history_frames: int = 1

    def __post_init__(self) -> None:
        if self.history_frames < 0:
            raise ConfigError("dummy policy history length must be non-negative")

    @property
    def label(self) -> str:
        return f"dummy:{self.history_frames}"


PolicyKind = Union[FullKV, ForcingKV, StreamingSinkRecent, DummyLocal]


def parse_policy(text: str) -> PolicyKind:
    """Parse ``full``, ``forcing``, ``streaming[:S:W]`` or ``dummy[:L]``."""
    name, *args = text.strip().lower().split(":")
    try:
        nums = [int(a) for a in args]
    except ValueError:
        raise ConfigError(f"bad policy parameters in {text!r}") from None
    if name == "full" and not nums:
        return FullKV()
    if name == "forcing" and not nums:
        return ForcingKV()
    if name == "streaming" and len(nums) in (0, 2):
        return StreamingSinkRecent(*nums)
    if name == "dummy" and len(nums) in (0, 1):
        return DummyLocal(*nums)
    raise ConfigError(f"unknown policy {text!r}")


@dataclass(frozen=True)
class SegmentKeepSet:
    frame: int
    kept: tuple[int, ...]
    similarities: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if any(b <= a for a, b in zip(self.kept, self.kept[1:])):
            raise ValueError(f"kept segments must be strictly increasing, got {self.kept}")


def score_segments(prev_block1: np.ndarray, new_block1: np.ndarray, segments: int) -> np.ndarray:
    """Cosine similarity of each segment of two frames' ``[F, d_concat]`` keys.

    A zero-norm segment scores 0.
    """
    prev_block1 = np.asarray(prev_block1)
    new_block1 = np.asarray(new_block1)
    if prev_block1.shape != new_block1.shape or prev_block1.ndim != 2:
        raise ShapeError(f"frame key shapes differ: {prev_block1.shape} vs {new_block1.shape}")
    bounds = segment_bounds(prev_block1.shape[0], segments)
    sims = kernels.segment_cosine(prev_block1, new_block1, bounds)
    if log.isEnabledFor(logging.DEBUG):
        for j in range(segments):
            a = prev_block1[bounds[j] : bounds[j + 1]]
            b = new_block1[bounds[j] : bounds[j + 1]]
            if not a.any() or not b.any():
                log.debug("segment %d has zero norm; similarity set to 0", j)
    return sims


def select_keep(similarities, ratio: float, frame: int = -1, formula: bool = False) -> SegmentKeepSet:
    """Keep the ``keep_count`` least similar segments; ties go to the lower index."""
    sims = np.asarray(similarities, dtype=np.float64)
    k = keep_count(ratio, len(sims), formula=formula)
    kept = kernels.bottomk(sims, k)
    return SegmentKeepSet(frame, tuple(int(j) for j in kept), tuple(float(s) for s in sims))


def block1_keys(layer0_frame_keys: np.ndarray) -> np.ndarray:
    """``[heads, F, d]`` layer-0 keys of one frame -> ``[F, heads * d]``."""
    h, f, d = layer0_frame_keys.shape
    return np.ascontiguousarray(layer0_frame_keys.transpose(1, 0, 2).reshape(f, h * d))


@dataclass
class _Slot:
    frame: int
    segments: tuple[int, ...]
    k: np.ndarray
    v: np.ndarray


@dataclass
class _HeadStore:
    sink_k: np.ndarray
    sink_v: np.ndarray
    slots: list[_Slot] = field(default_factory=list)

    @property
    def history_tokens(self) -> int:
        return sum(len(s.k) for s in self.slots)


class CacheState:
    """Compressed key/value store for every (layer, head) of one stream.

    Call ``append_chunk`` once per AR step, ``update_current`` for later
    denoising steps of the same chunk, ``compress_step`` between commit and
    attention, and ``attend_step`` to run attention.
    """

    def __init__(self, config: StreamConfig, policy: PolicyKind | None = None, head_types: HeadTypeMap | None = None):
        self.config = config
        self.policy = ForcingKV() if policy is None else policy
        self.head_types = head_types
        if isinstance(self.policy, (ForcingKV, DummyLocal)):
            if head_types is None:
                raise ConfigError(f"policy {self.policy.label} needs a head-type map")
            head_types.check_covers(config)
        self.sink_frames = policy_sink_frames(self.policy, config)
        empty = np.zeros((0, config.head_dim), dtype=np.float32)
        self.heads = {key: _HeadStore(empty, empty) for key in config.heads}
        self.frames_committed = 0
        self.ar_step = -1
        self.keep_sets: dict[int, SegmentKeepSet] = {}
        self.pending_block1: dict[int, np.ndarray] = {}
        self.eviction_log: list[dict] = []
        self.tokens_attended_last_step = 0
        self.attended_per_head: dict[tuple[int, int], int] = {}
        self._cur_k: np.ndarray | None = None
        self._cur_v: np.ndarray | None = None

    # -- geometry ---------------------------------------------------------

    @property
    def window_tokens(self) -> int:
        """Tokens of the full, uncompressed window including the live chunk."""
        cur = self.config.chunk_tokens if self._cur_k is not None else 0
        return self.frames_committed * self.config.tokens_per_frame + cur

    @property
    def tokens_full_equivalent(self) -> int:
        return self.window_tokens * len(self.heads)

    @property
    def tokens_stored(self) -> int:
        cur = self.config.chunk_tokens if self._cur_k is not None else 0
        return sum(len(s.sink_k) + s.history_tokens + cur for s in self.heads.values())

    def _check_chunk(self, k: np.ndarray, v: np.ndarray) -> None:
        cfg = self.config
        want = (cfg.layers, cfg.heads_per_layer, cfg.chunk_tokens, cfg.head_dim)
        if k.shape != want or v.shape != want:
            raise ShapeError(f"chunk K/V must be {want}, got {k.shape} and {v.shape}")

    # -- state transitions --------------------------------------------------

    def append_chunk(self, k: np.ndarray, v: np.ndarray) -> None:
        """Commit the live chunk to history (if any) and stage a new one."""
        self._check_chunk(k, v)
        if self._cur_k is not None:
            self._commit()
        self._cur_k = np.array(k, dtype=np.float32)
        self._cur_v = np.array(v, dtype=np.float32)
        self.ar_step += 1

    def update_current(self, k: np.ndarray, v: np.ndarray) -> None:
        """Replace the live chunk's K/V (a later denoising step of the same chunk)."""
        self._check_chunk(k, v)
        if self._cur_k is None:
            raise ShapeError("no chunk staged; call append_chunk first")
        self._cur_k = np.array(k, dtype=np.float32)
        self._cur_v = np.array(v, dtype=np.float32)

    def _commit(self) -> None:
        cfg = self.config
        f = cfg.tokens_per_frame
        all_segments = tuple(range(cfg.segments_per_frame))
        for pos in range(cfg.frames_per_chunk):
            frame = self.frames_committed + pos
            rows = slice(pos * f, (pos + 1) * f)
            for (l, h), store in self.heads.items():
                k = self._cur_k[l, h, rows]
                v = self._cur_v[l, h, rows]
                if frame < self.sink_frames:
                    store.sink_k = np.concatenate([store.sink_k, k])
                    store.sink_v = np.concatenate([store.sink_v, v])
                else:
                    store.slots.append(_Slot(frame, all_segments, k.copy(), v.copy()))
            if isinstance(self.policy, ForcingKV) and frame >= self.sink_frames:
                self.pending_block1[frame] = block1_keys(self._cur_k[0, :, rows])
        self.frames_committed += cfg.frames_per_chunk

    def compress_step(self) -> list[dict]:
        """Evict history according to the policy. Returns new eviction-log events."""
        if self.frames_committed == 0:
            return []
        policy = self.policy
        events: list[dict] = []
        if isinstance(policy, ForcingKV):
            events = self._score_pending()
            for key, store in self.heads.items():
                if self.head_types[key] is HeadType.STATIC:
                    del store.slots[:-1]
                else:
                    self._compact_dynamic(store)
        elif isinstance(policy, StreamingSinkRecent):
            for store in self.heads.values():
                _keep_last(store, policy.recent_frames)
        elif isinstance(policy, DummyLocal):
            for key, store in self.heads.items():
                static = self.head_types[key] is HeadType.STATIC
                _keep_last(store, 0 if static else policy.history_frames)
        self.eviction_log.extend(events)
        return events

    def _score_pending(self) -> list[dict]:
        cfg = self.config
        events = []
        for frame in sorted(self.pending_block1):
            nxt = self.pending_block1.get(frame + 1)
            if nxt is None or frame in self.keep_sets:
                continue
            sims = score_segments(self.pending_block1[frame], nxt, cfg.segments_per_frame)
            keep = select_keep(sims, cfg.ratio, frame, formula=cfg.bottomk_formula)
            self.keep_sets[frame] = keep
            events.append(
                {
                    "ar_step": self.ar_step,
                    "frame": frame,
                    "kept_segments": list(keep.kept),
                    "similarities": [round(s, 9) for s in keep.similarities],
                }
            )
        # Only the newest frame still waits for its successor.
        if self.pending_block1:
            newest = max(self.pending_block1)
            self.pending_block1 = {newest: self.pending_block1[newest]}
        return events

    def _compact_dynamic(self, store: _HeadStore) -> None:
        bounds = self.config.segment_bounds()
        n = self.config.segments_per_frame
        kept_slots = []
        for slot in store.slots:
            keep = self.keep_sets.get(slot.frame)
            if keep is None or len(slot.segments) != n:
                kept_slots.append(slot)
                continue
            if not keep.kept:
                continue
            rows = np.concatenate([np.arange(bounds[j], bounds[j + 1]) for j in keep.kept])
            kept_slots.append(_Slot(slot.frame, keep.kept, slot.k[rows], slot.v[rows]))
        store.slots = kept_slots

    # -- attention --------------------------------------------------------

    def gather(self, layer: int, head: int) -> tuple[np.ndarray, np.ndarray]:
        """Attended K/V of one head: sink, stored history, live chunk."""
        if self._cur_k is None:
            raise ShapeError("no chunk staged")
        store = self.heads[(layer, head)]
        ks = [store.sink_k, *(s.k for s in store.slots), self._cur_k[layer, head]]
        vs = [store.sink_v, *(s.v for s in store.slots), self._cur_v[layer, head]]
        return np.concatenate(ks), np.concatenate(vs)

    def attend_step(self, q: np.ndarray) -> np.ndarray:
        """Per-head attention of the chunk queries ``[L, H, C*F, d]`` over the compressed cache."""
        cfg = self.config
        if q.shape != (cfg.layers, cfg.heads_per_layer, cfg.chunk_tokens, cfg.head_dim):
            raise ShapeError(f"queries must be [L, H, C*F, d], got {q.shape}")
        out = np.empty(q.shape, dtype=np.float64)
        self.attended_per_head = {}
        for l, h in self.heads:
            k, v = self.gather(l, h)
            out[l, h] = attend_full(q[l, h], k, v)
            self.attended_per_head[(l, h)] = len(k)
        self.tokens_attended_last_step = sum(self.attended_per_head.values())
        return out

    def layout_mask(self, layer: int, head: int) -> np.ndarray:
        """Mask over the full window implied by what is physically stored."""
        cfg = self.config
        f = cfg.tokens_per_frame
        bounds = cfg.segment_bounds()
        mask = np.zeros(self.window_tokens, dtype=bool)
        store = self.heads[(layer, head)]
        mask[: len(store.sink_k)] = True
        for slot in store.slots:
            for j in slot.segments:
                mask[slot.frame * f + bounds[j] : slot.frame * f + bounds[j + 1]] = True
        mask[self.frames_committed * f :] = True
        return mask

    def index_map(self, layer: int, head: int) -> list[tuple[int, int, int, int]]:
        """``(frame, segment, start, stop)`` ranges of stored history within ``gather`` output."""
        bounds = self.config.segment_bounds()
        store = self.heads[(layer, head)]
        out, pos = [], len(store.sink_k)
        for slot in store.slots:
            for j in slot.segments:
                size = bounds[j + 1] - bounds[j]
                out.append((slot.frame, j, pos, pos + size))
                pos += size
        return out


def _keep_last(store: _HeadStore, frames: int) -> None:
    if frames <= 0:
        store.slots.clear()
    else:
        del store.slots[:-frames]


def policy_sink_frames(policy: PolicyKind, config: StreamConfig) -> int:
    if isinstance(policy, StreamingSinkRecent):
        return policy.sink_frames
    return config.sink_frames


def apply_policy(policy: PolicyKind, state: CacheState, head_types: HeadTypeMap | None = None) -> dict[tuple[int, int], np.ndarray]:
    """Keep masks over the full window, derived from the policy rules alone.

    Uses only the window geometry of ``state`` and, for ForcingKV, its
    keep-sets; never its physical storage.
    """
    cfg = state.config
    f = cfg.tokens_per_frame
    committed = state.frames_committed
    window = state.window_tokens
    sink = min(policy_sink_frames(policy, cfg), committed)
    history = list(range(sink, committed))
    bounds = cfg.segment_bounds()

    def frames_mask(frames) -> np.ndarray:
        mask = np.zeros(window, dtype=bool)
        mask[: sink * f] = True
        mask[committed * f :] = True
        for t in frames:
            mask[t * f : (t + 1) * f] = True
        return mask

    if isinstance(policy, (ForcingKV, DummyLocal)):
        if head_types is None:
            raise ConfigError(f"policy {policy.label} needs a head-type map")
        head_types.check_covers(cfg)

    masks = {}
    for key in cfg.heads:
        if isinstance(policy, FullKV):
            masks[key] = np.ones(window, dtype=bool)
        elif isinstance(policy, StreamingSinkRecent):
            recent = history[-policy.recent_frames :] if policy.recent_frames else []
            masks[key] = frames_mask(recent)
        elif isinstance(policy, DummyLocal):
            if head_types[key] is HeadType.STATIC:
                masks[key] = frames_mask([])
            else:
                recent = history[-policy.history_frames :] if policy.history_frames else []
                masks[key] = frames_mask(recent)
        elif head_types[key] is HeadType.STATIC:
            masks[key] = frames_mask(history[-1:])
        else:
            mask = frames_mask(history[-1:])
            for t in history[:-1]:
                keep = state.keep_sets.get(t)
                if keep is None:
                    raise ConfigError(f"frame {t} has no keep-set; run compress_step first")
                for j in keep.kept:
                    mask[t * f + bounds[j] : t * f + bounds[j + 1]] = True
            masks[key] = mask
    return masks
