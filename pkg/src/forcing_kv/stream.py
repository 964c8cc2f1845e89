"""Synthetic latent streams with planted head roles and segment similarity.

Randomness comes from numpy's PCG64 generator. Every tensor is drawn from its
own generator seeded with ``[seed, tag, *indices]`` through ``SeedSequence``,
so output depends only on ``(config, spec)`` and not on access order.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Iterator

import numpy as np

from .attention import Region, RegionMap
from .config import PlantedStreamSpec, StreamConfig
from .errors import ConfigError, ShapeError
from .profiler import accumulate_masses, profiling_steps
from .trace import TensorBlob

_TAG_ROLES, _TAG_KEYS, _TAG_VALUES, _TAG_QUERY, _TAG_NOISE = range(5)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *key])))


class StreamSource:
    """Chunk-level access to Q/K/V of a stream, shaped ``[layers, heads, C*F, d]``.

    The K/V committed to the cache for an AR step are the ones produced by its
    final denoising step.
    """

    config: StreamConfig

    def chunk(self, ar_step: int, denoise_step: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        raise NotImplementedError

    def key_bias(self, layer: int, head: int, regions: RegionMap) -> np.ndarray | None:
        return None

    def committed(self, ar_step: int) -> tuple[np.ndarray, np.ndarray]:
        _, k, v = self.chunk(ar_step, self.config.denoise_steps - 1)
        return k, v

    def window_kv(self, ar_step: int, denoise_step: int) -> tuple[np.ndarray, np.ndarray]:
        """Full uncompressed window: committed history followed by the live chunk."""
        _, k_cur, v_cur = self.chunk(ar_step, denoise_step)
        ks = [self.committed(i)[0] for i in range(ar_step)] + [k_cur]
        vs = [self.committed(i)[1] for i in range(ar_step)] + [v_cur]
        return np.concatenate(ks, axis=2), np.concatenate(vs, axis=2)

    def frame_keys(self, frame: int) -> np.ndarray:
        """Committed keys of one frame, ``[layers, heads, F, d]``."""
        cfg = self.config
        step, pos = divmod(frame, cfg.frames_per_chunk)
        f = cfg.tokens_per_frame
        return self.committed(step)[0][:, :, pos * f : (pos + 1) * f]

    def __iter__(self) -> Iterator[tuple[tuple[int, int, int, int], tuple[np.ndarray, np.ndarray, np.ndarray]]]:
        cfg = self.config
        for i in range(cfg.ar_steps):
            for d in range(cfg.denoise_steps):
                q, k, v = self.chunk(i, d)
                for l in range(cfg.layers):
                    for h in range(cfg.heads_per_layer):
                        yield (i, d, l, h), (q[l, h], k[l, h], v[l, h])

    def blobs(self) -> list[TensorBlob]:
        """Trace records ordered by (ar_step, denoise_step, layer, kind Q/K/V), each ``[heads, C*F, d]``."""
        cfg = self.config
        out = []
        for i in range(cfg.ar_steps):
            for d in range(cfg.denoise_steps):
                q, k, v = self.chunk(i, d)
                for l in range(cfg.layers):
                    out.extend(TensorBlob.from_array(t[l]) for t in (q, k, v))
        return out


class PlantedStream(StreamSource):
    """Stream whose keys follow a per-segment AR(1) process across frames.

    Segment ``j`` of frame ``t+1`` is ``rho_j * K[t, j] + sqrt(1 - rho_j^2) * eps``.
    Planted static heads receive ``static_logit_bias`` on the current chunk and
    the transition frame; planted dynamic heads receive
    ``dynamic_history_bias`` on the remaining (non-sink) history.
    """

    def __init__(self, config: StreamConfig, spec: PlantedStreamSpec):
        self.config = config
        self.spec = spec
        self.rho = np.array(spec.rho_for(config))
        cfg = config
        n_heads = cfg.layers * cfg.heads_per_layer
        n_static = int(round(spec.static_head_fraction * n_heads))
        order = _rng(spec.seed, _TAG_ROLES).permutation(n_heads)
        roles = np.zeros(n_heads, dtype=bool)
        roles[order[:n_static]] = True
        self.static_roles = roles.reshape(cfg.layers, cfg.heads_per_layer)
        self._keys = self._ar1_keys()
        self._values = _rng(spec.seed, _TAG_VALUES).standard_normal(self._keys.shape)
        self._chunk = lru_cache(maxsize=64)(self._make_chunk)

    def _ar1_keys(self) -> np.ndarray:
        cfg = self.config
        f, frames = cfg.tokens_per_frame, cfg.total_frames
        rng = _rng(self.spec.seed, _TAG_KEYS)
        noise = rng.standard_normal((frames, cfg.layers, cfg.heads_per_layer, f, cfg.head_dim))
        bounds = cfg.segment_bounds()
        rho_tok = np.empty(f)
        for j in range(cfg.segments_per_frame):
            rho_tok[bounds[j] : bounds[j + 1]] = self.rho[j]
        rho_tok = rho_tok[None, None, :, None]
        keep = np.sqrt(1.0 - rho_tok**2)
        keys = np.empty_like(noise)
        keys[0] = noise[0]
        for t in range(1, frames):
            keys[t] = rho_tok * keys[t - 1] + keep * noise[t]
        # [frames, L, H, F, d] -> [L, H, frames*F, d]
        return keys.transpose(1, 2, 0, 3, 4).reshape(cfg.layers, cfg.heads_per_layer, frames * f, cfg.head_dim)

    def _make_chunk(self, ar_step: int, denoise_step: int):
        cfg = self.config
        lo, hi = ar_step * cfg.chunk_tokens, (ar_step + 1) * cfg.chunk_tokens
        shape = (cfg.layers, cfg.heads_per_layer, cfg.chunk_tokens, cfg.head_dim)
        q = _rng(self.spec.seed, _TAG_QUERY, ar_step, denoise_step).standard_normal(shape)
        k = self._keys[:, :, lo:hi]
        v = self._values[:, :, lo:hi]
        # Earlier denoising steps see noisier K/V; the final step is clean.
        sigma = (cfg.denoise_steps - 1 - denoise_step) / cfg.denoise_steps
        if sigma > 0:
            rng = _rng(self.spec.seed, _TAG_NOISE, ar_step, denoise_step)
            k = k + sigma * rng.standard_normal(shape)
            v = v + sigma * rng.standard_normal(shape)
        out = tuple(np.ascontiguousarray(t, dtype=np.float32) for t in (q, k, v))
        for t in out:
            t.setflags(write=False)
        return out

    def chunk(self, ar_step: int, denoise_step: int):
        cfg = self.config
        if not (0 <= ar_step < cfg.ar_steps and 0 <= denoise_step < cfg.denoise_steps):
            raise IndexError(f"step ({ar_step}, {denoise_step}) outside the stream")
        return self._chunk(ar_step, denoise_step)

    def key_bias(self, layer: int, head: int, regions: RegionMap) -> np.ndarray:
        labels = regions.labels
        if self.static_roles[layer, head]:
            b = self.spec.static_logit_bias
            return np.where((labels == Region.GENERATE) | (labels == Region.TRANSITION), b, 0.0)
        return np.where(labels == Region.HISTORY, self.spec.dynamic_history_bias, 0.0)

    def self_check(self, alpha: float | None = None) -> dict[tuple[int, int], float]:
        """Confirm planted roles straddle ``alpha``; returns each head's local-mass ratio.

        Raises ConfigError when a static head does not exceed ``alpha`` or a
        dynamic head does not fall below it (e.g. the stream is too short to
        have history beyond the transition frame).
        """
        alpha = self.config.alpha if alpha is None else alpha
        if not profiling_steps(self.config):
            raise ConfigError("stream has no AR step with a non-sink transition frame")
        ratios = {key: m.local_ratio for key, m in accumulate_masses(self).items()}
        for (l, h), ratio in ratios.items():
            static = bool(self.static_roles[l, h])
            if static and not ratio > alpha:
                raise ConfigError(f"planted static head ({l}, {h}) has ratio {ratio:.4f} <= alpha {alpha}")
            if not static and not ratio < alpha:
                raise ConfigError(f"planted dynamic head ({l}, {h}) has ratio {ratio:.4f} >= alpha {alpha}")
        return ratios

    def planted_labels(self) -> dict[tuple[int, int], str]:
        return {
            (l, h): ("static" if self.static_roles[l, h] else "dynamic")
            for l in range(self.config.layers)
            for h in range(self.config.heads_per_layer)
        }


class TraceStream(StreamSource):
    """Stream backed by trace records in ``StreamSource.blobs`` order."""

    def __init__(self, config: StreamConfig, blobs: list[TensorBlob]):
        cfg = config
        expected = cfg.ar_steps * cfg.denoise_steps * cfg.layers * 3
        if len(blobs) != expected:
            raise ShapeError(f"trace holds {len(blobs)} records, config needs {expected}")
        want = (cfg.heads_per_layer, cfg.chunk_tokens, cfg.head_dim)
        for n, blob in enumerate(blobs):
            if blob.dims != want:
                raise ShapeError(f"record {n} has dims {blob.dims}, expected {want}")
        self.config = config
        arrays = np.stack([b.to_array() for b in blobs])
        self._data = arrays.reshape(cfg.ar_steps, cfg.denoise_steps, cfg.layers, 3, *want)
        self._data.setflags(write=False)

    def chunk(self, ar_step: int, denoise_step: int):
        block = self._data[ar_step, denoise_step]
        return block[:, 0], block[:, 1], block[:, 2]


def generate_stream(config: StreamConfig, spec: PlantedStreamSpec) -> PlantedStream:
    if len(spec.segment_rho) not in (0, config.segments_per_frame):
        raise ConfigError(
            f"segment_rho has {len(spec.segment_rho)} entries, expected {config.segments_per_frame}"
        )
    return PlantedStream(config, spec)
