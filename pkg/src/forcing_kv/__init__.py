"""Hybrid static/dynamic KV-cache compression for chunkwise autoregressive attention.

Heads are profiled offline as static (attending to the current chunk and the
most recent cached frame) or dynamic. Static heads keep only sink frames and
that transition frame; dynamic heads keep the segments of each cached frame
that changed most relative to the next frame.
"""

from .attention import MassBreakdown, Region, RegionMap, attend_full, attend_masked, attention_mass
from .cache import (
    CacheState,
    DummyLocal,
    ForcingKV,
    FullKV,
    SegmentKeepSet,
    StreamingSinkRecent,
    apply_policy,
    parse_policy,
    score_segments,
    select_keep,
)
from .config import PlantedStreamSpec, RunConfig, StreamConfig, keep_count, segment_bounds
from .engine import run_policy
from .errors import ConfigError, FormatError, MetricError, ProfilingError, ShapeError, VerificationError
from .metrics import (
    FlowDiffSeries,
    attention_flops,
    cache_memory_bytes,
    chunk_discontinuity,
    naive_flow_diff,
    speedup,
)
from .profiler import HeadType, HeadTypeMap, accumulate_masses, divergence_stats, frame_features, profile_heads
from .stream import PlantedStream, TraceStream, generate_stream
from .trace import TensorBlob, read_trace, write_trace

__version__ = "0.1.0"
