import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from forcing_kv import kernels
from forcing_kv.attention import attend_full, attend_masked
from forcing_kv.cache import (
    CacheState,
    DummyLocal,
    ForcingKV,
    FullKV,
    SegmentKeepSet,
    StreamingSinkRecent,
    apply_policy,
    block1_keys,
    parse_policy,
    score_segments,
    select_keep,
)
from forcing_kv.config import PlantedStreamSpec, StreamConfig
from forcing_kv.engine import run_policy
from forcing_kv.errors import ConfigError, ShapeError
from forcing_kv.profiler import HeadEntry, HeadType, HeadTypeMap
from forcing_kv.stream import generate_stream


def sort_oracle(sims, ratio, n):
    """Full sort on (similarity, index); keep count from exact rational arithmetic."""
    k = math.floor((1 - Fraction(str(ratio))) * n)
    order = sorted(range(n), key=lambda j: (sims[j], j))
    return sorted(order[:k])


# -- scoring and selection ----------------------------------------------------


def test_identical_frames_score_one(backend):
    x = np.random.default_rng(0).standard_normal((12, 8))
    assert np.allclose(score_segments(x, x, 6), 1.0)


def test_negated_segment_scores_minus_one(backend):
    x = np.random.default_rng(1).standard_normal((12, 8))
    y = x.copy()
    y[4:6] *= -1
    sims = score_segments(x, y, 6)
    assert sims[2] == pytest.approx(-1.0)
    assert np.allclose(np.delete(sims, 2), 1.0)


def test_scalar_cosine_example(backend):
    sims = score_segments(np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]]), 1)
    assert sims[0] == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert sims[0] == pytest.approx(0.70711, abs=5e-6)


def test_zero_norm_segment_scores_zero(backend):
    x = np.ones((4, 2))
    y = x.copy()
    y[2:] = 0.0
    assert score_segments(x, y, 2).tolist() == [1.0, 0.0]


def test_shape_mismatch_in_scoring():
    with pytest.raises(ShapeError):
        score_segments(np.zeros((4, 2)), np.zeros((4, 3)), 2)


def test_select_keep_example(backend):
    keep = select_keep([0.9, 0.1, 0.5, 0.7, 0.3, 0.8], 0.3)
    assert keep.kept == (1, 2, 3, 4)


def test_select_keep_r_zero_keeps_all(backend):
    assert select_keep([0.4, 0.2, 0.9], 0.0).kept == (0, 1, 2)


def test_select_keep_ties_prefer_low_index(backend):
    assert select_keep([0.5] * 6, 0.5).kept == (0, 1, 2)


def test_select_keep_r_one_is_empty(backend):
    assert select_keep([0.5, 0.1], 1.0).kept == ()


def test_select_keep_formula_reading(backend):
    assert select_keep([0.9, 0.1, 0.5, 0.7, 0.3, 0.8], 0.3, formula=True).kept == (1,)


def test_keep_set_rejects_unsorted():
    with pytest.raises(ValueError):
        SegmentKeepSet(0, (2, 1))


@settings(max_examples=300, deadline=None)
@given(
    sims=st.lists(st.sampled_from([-1.0, -0.5, 0.0, 0.25, 0.5, 0.9, 1.0]), min_size=1, max_size=16),
    ratio=st.sampled_from([0, 0.25, 0.3, 0.5, 1]),
)
def test_keep_set_matches_sort_oracle(sims, ratio):
    for name in kernels.BACKENDS:
        with kernels.using(name):
            assert list(select_keep(sims, ratio).kept) == sort_oracle(sims, ratio, len(sims))


def test_block1_keys_concatenate_heads():
    k = np.arange(2 * 3 * 4).reshape(2, 3, 4)
    out = block1_keys(k)
    assert out.shape == (3, 8)
    assert out[1].tolist() == k[0, 1].tolist() + k[1, 1].tolist()


def test_parse_policy():
    assert parse_policy("full") == FullKV()
    assert parse_policy("forcing") == ForcingKV()
    assert parse_policy("streaming:3:4") == StreamingSinkRecent(3, 4)
    assert parse_policy("streaming") == StreamingSinkRecent(3, 4)
    assert parse_policy("dummy:1") == DummyLocal(1)
    assert parse_policy("dummy:6").label == "dummy:6"
    for bad in ("nope", "streaming:3", "dummy:x", "full:1", "dummy:-1"):
        with pytest.raises(ConfigError):
            parse_policy(bad)


# -- state bookkeeping --------------------------------------------------------


def _cfg(**kw):
    base = dict(layers=2, heads_per_layer=2, head_dim=8, frames_per_chunk=2, tokens_per_frame=6, segments_per_frame=3, sink_frames=1, ar_steps=6, denoise_steps=2, ratio=0.34)
    base.update(kw)
    return StreamConfig(**base)


def _mixed_types(cfg):
    return HeadTypeMap(
        0.8,
        {(l, h): HeadEntry(HeadType.STATIC if h == 0 else HeadType.DYNAMIC, 0.0) for l, h in cfg.heads},
    )


def _committed_state(cfg, policy, head_types, steps):
    s = generate_stream(cfg, PlantedStreamSpec(seed=1))
    state = CacheState(cfg, policy, head_types)
    for i in range(steps):
        state.append_chunk(*s.committed(i))
    return s, state


def test_first_append_has_empty_history():
    cfg = _cfg()
    _, state = _committed_state(cfg, ForcingKV(), _mixed_types(cfg), 1)
    assert all(not store.slots for store in state.heads.values())
    assert state.frames_committed == 0
    # Sink frames sit in the live chunk until it is committed.
    assert all(len(store.sink_k) == 0 for store in state.heads.values())


def test_second_append_commits_chunk_minus_sink():
    cfg = _cfg()
    _, state = _committed_state(cfg, ForcingKV(), _mixed_types(cfg), 2)
    for store in state.heads.values():
        assert len(store.sink_k) == cfg.sink_frames * cfg.tokens_per_frame
        assert [s.frame for s in store.slots] == [1]
    assert state.frames_committed == cfg.frames_per_chunk


def test_compression_frees_evicted_segments():
    cfg = _cfg(layers=1, heads_per_layer=1)
    types = HeadTypeMap.uniform(cfg, HeadType.DYNAMIC)
    _, state = _committed_state(cfg, ForcingKV(), types, 3)
    before = state.tokens_stored
    state.compress_step()
    # Frames 1 and 2 are scored (successors 2 and 3 cached); frame 3 stays full.
    bounds = cfg.segment_bounds()
    freed = 0
    for frame in (1, 2):
        kept = state.keep_sets[frame].kept
        assert len(kept) == cfg.keep_count() == 1
        freed += sum(bounds[j + 1] - bounds[j] for j in range(3) if j not in kept)
    assert before - state.tokens_stored == freed == 2 * (3 - 1) * 2


def test_compress_before_any_commit_is_noop():
    cfg = _cfg()
    _, state = _committed_state(cfg, ForcingKV(), _mixed_types(cfg), 1)
    before = state.tokens_stored
    assert state.compress_step() == []
    assert state.tokens_stored == before == state.tokens_full_equivalent


def test_static_window_after_step_two():
    cfg = _cfg(sink_frames=1)
    types = HeadTypeMap.uniform(cfg, HeadType.STATIC)
    s, state = _committed_state(cfg, ForcingKV(), types, 3)
    state.compress_step()
    state.attend_step(s.chunk(2, 0)[0])
    f, c = cfg.tokens_per_frame, cfg.frames_per_chunk
    assert set(state.attended_per_head.values()) == {cfg.sink_frames * f + f + c * f}


def test_r_zero_dynamic_keeps_full_window():
    cfg = _cfg(ratio=0.0)
    types = HeadTypeMap.uniform(cfg, HeadType.DYNAMIC)
    s, state = _committed_state(cfg, ForcingKV(), types, 4)
    state.compress_step()
    state.attend_step(s.chunk(3, 0)[0])
    assert set(state.attended_per_head.values()) == {state.window_tokens}


def test_first_step_outputs_equal_plain_attention():
    cfg = _cfg()
    s = generate_stream(cfg, PlantedStreamSpec(seed=2))
    for types in (HeadTypeMap.uniform(cfg, HeadType.STATIC), HeadTypeMap.uniform(cfg, HeadType.DYNAMIC)):
        state = CacheState(cfg, ForcingKV(), types)
        q, k, v = s.chunk(0, 0)
        state.append_chunk(k, v)
        out = state.attend_step(q)
        for l, h in cfg.heads:
            assert np.allclose(out[l, h], attend_full(q[l, h], k[l, h], v[l, h]), atol=1e-12)


def test_all_static_mask_has_exactly_one_history_frame():
    cfg = _cfg(sink_frames=1)
    types = HeadTypeMap.uniform(cfg, HeadType.STATIC)
    _, state = _committed_state(cfg, ForcingKV(), types, 4)
    state.compress_step()
    f = cfg.tokens_per_frame
    for mask in apply_policy(ForcingKV(), state, types).values():
        history = mask[cfg.sink_frames * f : state.frames_committed * f]
        assert history.sum() == f
        assert history[-f:].all()


def test_streaming_baseline_mask():
    cfg = _cfg(frames_per_chunk=1, ar_steps=12)
    _, state = _committed_state(cfg, StreamingSinkRecent(3, 4), None, 12)
    state.compress_step()
    f = cfg.tokens_per_frame
    for mask in apply_policy(StreamingSinkRecent(3, 4), state).values():
        frames = [t for t in range(state.frames_committed) if mask[t * f]]
        assert frames == [0, 1, 2, 7, 8, 9, 10]
        assert mask[state.frames_committed * f :].all()


def test_dummy_baseline_on_ten_frame_history():
    cfg = _cfg(frames_per_chunk=1, sink_frames=1, ar_steps=12)
    types = _mixed_types(cfg)
    _, state = _committed_state(cfg, DummyLocal(1), types, 12)
    state.compress_step()
    f = cfg.tokens_per_frame
    assert state.frames_committed - cfg.sink_frames == 10
    masks = apply_policy(DummyLocal(1), state, types)
    for (l, h), mask in masks.items():
        history = mask[f : state.frames_committed * f].reshape(-1, f).all(axis=1)
        assert history.sum() == (0 if h == 0 else 1)
        if h:
            assert history[-1]


def test_oversized_windows_are_clamped():
    cfg = _cfg(frames_per_chunk=1, ar_steps=3)
    _, state = _committed_state(cfg, StreamingSinkRecent(10, 50), None, 3)
    state.compress_step()
    masks = apply_policy(StreamingSinkRecent(10, 50), state)
    assert all(m.all() for m in masks.values())


def test_full_kv_keeps_everything():
    cfg = _cfg()
    s = generate_stream(cfg, PlantedStreamSpec(seed=3))
    r = run_policy(s, FullKV(), verify=True)
    assert r.retention_ratio == 1.0
    assert r.speedup == 1.0


def test_missing_head_type_entry():
    cfg = _cfg()
    partial = HeadTypeMap(0.8, {(0, 0): HeadEntry(HeadType.STATIC, 1.0)})
    with pytest.raises(ConfigError, match="missing"):
        CacheState(cfg, ForcingKV(), partial)
    with pytest.raises(ConfigError):
        CacheState(cfg, ForcingKV(), None)


def test_chunk_shape_checked():
    cfg = _cfg()
    state = CacheState(cfg, FullKV())
    with pytest.raises(ShapeError):
        state.append_chunk(np.zeros((1, 1, 1, 1)), np.zeros((1, 1, 1, 1)))
    with pytest.raises(ShapeError):
        state.update_current(np.zeros((2, 2, 12, 8)), np.zeros((2, 2, 12, 8)))


def test_eviction_log_lines_are_json():
    cfg = _cfg()
    s = generate_stream(cfg, PlantedStreamSpec(seed=4))
    r = run_policy(s, ForcingKV(), _mixed_types(cfg))
    assert r.eviction_log
    frames = []
    for event in r.eviction_log:
        line = json.dumps(event)
        back = json.loads(line)
        assert set(back) == {"ar_step", "frame", "kept_segments", "similarities"}
        assert len(back["similarities"]) == cfg.segments_per_frame
        frames.append(back["frame"])
    # Every non-sink frame except the newest is scored exactly once.
    assert frames == list(range(cfg.sink_frames, cfg.total_frames - cfg.frames_per_chunk - 1))


def test_index_map_points_into_gathered_keys():
    cfg = _cfg()
    s, state = _committed_state(cfg, ForcingKV(), _mixed_types(cfg), 4)
    state.compress_step()
    f = cfg.tokens_per_frame
    bounds = cfg.segment_bounds()
    full_k = np.concatenate([s.committed(i)[0] for i in range(3)], axis=2)
    for l, h in cfg.heads:
        k, _ = state.gather(l, h)
        for frame, seg, start, stop in state.index_map(l, h):
            lo = frame * f + bounds[seg]
            assert np.array_equal(k[start:stop], full_k[l, h, lo : lo + (stop - start)])


# -- policy invariants over random small configs ------------------------------

small_configs = st.builds(
    lambda L, H, C, F, n_frac, S, A, r, seed: (
        StreamConfig(
            layers=L,
            heads_per_layer=H,
            head_dim=4,
            frames_per_chunk=C,
            tokens_per_frame=F,
            segments_per_frame=max(1, min(4, F, round(n_frac * 4))),
            sink_frames=S,
            ar_steps=A,
            denoise_steps=2,
            ratio=r,
        ),
        seed,
    ),
    L=st.integers(1, 2),
    H=st.integers(1, 4),
    C=st.integers(1, 2),
    F=st.integers(1, 8),
    n_frac=st.floats(0.25, 1.0),
    S=st.integers(0, 2),
    A=st.integers(4, 6),
    r=st.sampled_from([0.0, 0.25, 0.3, 0.5, 1.0]),
    seed=st.integers(0, 2**32 - 1),
)

policies = st.sampled_from([FullKV(), ForcingKV(), StreamingSinkRecent(1, 2), StreamingSinkRecent(3, 4), DummyLocal(1), DummyLocal(2)])


def _random_types(cfg, seed):
    rng = np.random.default_rng(seed)
    return HeadTypeMap(
        0.8, {k: HeadEntry(HeadType.STATIC if rng.random() < 0.5 else HeadType.DYNAMIC, 0.0) for k in cfg.heads}
    )


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(cs=small_configs, policy=policies)
def test_policy_invariants(cs, policy):
    cfg, seed = cs
    s = generate_stream(cfg, PlantedStreamSpec(seed=seed))
    types = _random_types(cfg, seed)
    state = CacheState(cfg, policy, types)
    full_state = CacheState(cfg, FullKV())
    f = cfg.tokens_per_frame
    for i in range(cfg.ar_steps):
        for d in range(cfg.denoise_steps):
            q, k, v = s.chunk(i, d)
            if d == 0:
                state.append_chunk(k, v)
                full_state.append_chunk(k, v)
                if i >= 1:
                    state.compress_step()
            else:
                state.update_current(k, v)
                full_state.update_current(k, v)
            out = state.attend_step(q)
            full_state.attend_step(q)
            masks = apply_policy(policy, state, types)
            kf, vf = s.window_kv(i, d)
            sink = min(state.sink_frames, state.frames_committed)
            for (l, h), mask in masks.items():
                # Oracle equivalence against masked attention on the numpy backend.
                with kernels.using("python"):
                    ref = attend_masked(q[l, h], kf[l, h], vf[l, h], mask)
                assert np.abs(ref - out[l, h]).max() < 1e-5
                assert np.array_equal(mask, state.layout_mask(l, h))
                # Sink immortality.
                assert mask[: sink * f].all()
                if isinstance(policy, ForcingKV) and types[(l, h)] is HeadType.STATIC and state.frames_committed > sink:
                    t = state.frames_committed - 1
                    assert mask[t * f : (t + 1) * f].all()
            assert state.tokens_attended_last_step <= full_state.tokens_attended_last_step
            assert state.tokens_stored <= state.tokens_full_equivalent
    if isinstance(policy, ForcingKV):
        for frame, keep in state.keep_sets.items():
            # Keep-set from layer-0 keys alone, shared by every layer.
            prev = block1_keys(s.frame_keys(frame)[0])
            nxt = block1_keys(s.frame_keys(frame + 1)[0])
            with kernels.using("python"):
                sims = score_segments(prev, nxt, cfg.segments_per_frame)
            assert list(keep.kept) == sort_oracle(list(sims), cfg.ratio, cfg.segments_per_frame)
            for l, h in cfg.heads:
                if types[(l, h)] is HeadType.DYNAMIC:
                    segs = [seg for fr, seg, _, _ in state.index_map(l, h) if fr == frame]
                    assert segs == list(keep.kept)


def test_forcing_budget_strictly_below_full():
    cfg = _cfg(ratio=0.3, segments_per_frame=3)
    s = generate_stream(cfg, PlantedStreamSpec(seed=5))
    forcing = run_policy(s, ForcingKV(), _mixed_types(cfg))
    full = run_policy(s, FullKV())
    for a, b in zip(forcing.records, full.records):
        assert a.attended_tokens <= b.attended_tokens
        history = a.full_tokens // len(cfg.heads) // cfg.tokens_per_frame - cfg.frames_per_chunk - cfg.sink_frames
        if history >= 2:
            assert a.attended_tokens < b.attended_tokens
