import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forcing_kv.attention import MassBreakdown
from forcing_kv.config import PlantedStreamSpec, StreamConfig
from forcing_kv.errors import ConfigError, ProfilingError
from forcing_kv.profiler import (
    HeadType,
    HeadTypeMap,
    accumulate_masses,
    divergence_stats,
    frame_features,
    profile_heads,
    profiling_steps,
)
from forcing_kv.stream import generate_stream


def test_chunk_only_head_is_static():
    hm = profile_heads({(0, 0): MassBreakdown(10.0, 10.0, 0.0, 0.0)}, 0.8)
    assert hm[(0, 0)] is HeadType.STATIC
    assert hm.entries[(0, 0)].ratio == 1.0


def test_uniform_head_is_dynamic():
    # 1 sink + 10 history + 1 transition + 3 generate frames under uniform weights.
    hm = profile_heads({(0, 0): MassBreakdown(15.0, 3.0, 1.0, 1.0)}, 0.8)
    assert hm[(0, 0)] is HeadType.DYNAMIC
    assert hm.entries[(0, 0)].ratio == pytest.approx(4 / 14)


def test_tie_at_alpha_is_dynamic():
    hm = profile_heads({(0, 0): MassBreakdown(1.0, 0.5, 0.0, 0.0)}, 0.5)
    assert hm[(0, 0)] is HeadType.DYNAMIC


def test_default_alpha():
    assert StreamConfig(1, 1, 1, 1, 1, segments_per_frame=1).alpha == 0.8


def test_degenerate_head_names_indices():
    with pytest.raises(ProfilingError) as info:
        profile_heads({(0, 0): MassBreakdown(1.0, 0.5, 0.0, 0.0), (2, 3): MassBreakdown(4.0, 0.0, 0.0, 4.0)})
    assert (info.value.layer, info.value.head) == (2, 3)
    assert "layer 2, head 3" in str(info.value)


def test_bad_alpha():
    with pytest.raises(ConfigError):
        profile_heads({}, 1.0)


masses = st.builds(
    lambda gen, trans, hist, sink: MassBreakdown(gen + trans + hist + sink, gen, trans, sink),
    st.floats(0, 10),
    st.floats(0, 10),
    st.floats(0.001, 10),
    st.floats(0, 10),
)


@settings(max_examples=200, deadline=None)
@given(m=st.dictionaries(st.tuples(st.integers(0, 3), st.integers(0, 3)), masses, min_size=1), lo=st.floats(0.01, 0.98), step=st.floats(0.001, 0.5))
def test_raising_alpha_never_adds_static_heads(m, lo, step):
    hi = min(lo + step, 0.99)
    low, high = profile_heads(m, lo), profile_heads(m, hi)
    for key in m:
        if high[key] is HeadType.STATIC:
            assert low[key] is HeadType.STATIC


def test_head_map_json_round_trip():
    hm = profile_heads({(1, 0): MassBreakdown(2.0, 1.9, 0.0, 0.0), (0, 1): MassBreakdown(2.0, 0.2, 0.1, 0.0)}, 0.8)
    text = hm.to_json()
    data = json.loads(text)
    assert data["alpha"] == 0.8
    assert [(h["layer"], h["head"], h["type"]) for h in data["heads"]] == [(0, 1, "dynamic"), (1, 0, "static")]
    back = HeadTypeMap.from_json(text)
    assert back.labels() == hm.labels()
    for key, entry in hm.entries.items():
        assert back.entries[key].ratio == pytest.approx(entry.ratio, abs=1e-12)
    assert back.to_json() == text
    with pytest.raises(ConfigError):
        HeadTypeMap.from_json('{"heads": []}')


def test_missing_head_lookup():
    with pytest.raises(ConfigError, match="no entry"):
        HeadTypeMap(0.8, {})[(0, 0)]


def _cfg(**kw):
    base = dict(layers=2, heads_per_layer=4, head_dim=16, frames_per_chunk=1, tokens_per_frame=8, segments_per_frame=4, sink_frames=1, ar_steps=6, denoise_steps=2)
    base.update(kw)
    return StreamConfig(**base)


def test_profiling_steps_skip_first_and_sink_only_windows():
    assert profiling_steps(_cfg()) == [2, 3, 4, 5]
    assert profiling_steps(_cfg(frames_per_chunk=2)) == [1, 2, 3, 4, 5]
    assert profiling_steps(_cfg(sink_frames=0)) == [1, 2, 3, 4, 5]


@pytest.mark.parametrize("seed", range(4))
def test_planted_recovery(seed):
    s = generate_stream(_cfg(), PlantedStreamSpec(seed=seed, static_head_fraction=0.5))
    hm = profile_heads(accumulate_masses(s), 0.8)
    assert hm.labels() == s.planted_labels()


def test_single_prompt_matches_concatenated_prompts():
    cfg = _cfg()
    streams = [generate_stream(cfg, PlantedStreamSpec(seed=100 + n, static_head_fraction=0.5)) for n in range(5)]
    # Roles are seed-derived; pin one layout so the five prompts share head roles.
    roles = streams[0].static_roles
    for s in streams:
        s.static_roles = roles
    single = profile_heads(accumulate_masses(streams[0]))
    total = {k: MassBreakdown() for k in cfg.heads}
    for s in streams:
        for k, m in accumulate_masses(s).items():
            total[k] = total[k] + m
    assert profile_heads(total).labels() == single.labels()


def test_frame_features_are_normalized():
    s = generate_stream(_cfg(), PlantedStreamSpec(seed=2, static_head_fraction=0.5))
    feats = frame_features(s, ar_step=5)
    assert len(feats) == 2 * 4 * 2
    for vec in feats.values():
        assert vec.shape == (4,)
        assert (vec >= 0).all()
        assert vec.sum() == pytest.approx(1.0, abs=1e-4)
    with pytest.raises(ConfigError):
        frame_features(s, ar_step=1)


def test_identical_samples_have_zero_intra():
    a = np.array([0.2, 0.3, 0.5])
    b = np.array([0.5, 0.5, 0.0])
    intra, inter = divergence_stats({"h0": [a, a, a], "h1": [b, b]})
    assert intra == pytest.approx(0.0, abs=1e-12)
    assert inter > 0


def test_orthogonal_one_hots_have_unit_inter():
    intra, inter = divergence_stats({"h0": [np.array([1.0, 0, 0])] * 2, "h1": [np.array([0, 0, 1.0])] * 2})
    assert inter == pytest.approx(1.0, abs=1e-12)
    assert intra == pytest.approx(0.0, abs=1e-12)


def test_divergence_preconditions():
    with pytest.raises(ConfigError):
        divergence_stats({"h0": [np.ones(2), np.ones(2)]})
    with pytest.raises(ConfigError):
        divergence_stats({"h0": [np.ones(2)], "h1": [np.ones(2), np.ones(2)]})
    with pytest.raises(ConfigError, match="zero-norm"):
        divergence_stats({"h0": [np.ones(2), np.zeros(2)], "h1": [np.ones(2), np.ones(2)]})


def test_planted_heads_cluster():
    # Samples are prompts (seeds) and denoising steps, with the role layout held fixed.
    cfg = _cfg(ar_steps=8)
    features: dict = {}
    roles = None
    for seed in range(6):
        s = generate_stream(cfg, PlantedStreamSpec(seed=seed, static_head_fraction=0.5))
        if roles is None:
            roles = s.static_roles
        s.static_roles = roles
        for (l, h, d), vec in frame_features(s, ar_step=7).items():
            features.setdefault((l, h), []).append(vec)
    intra, inter = divergence_stats(features)
    assert intra < inter
