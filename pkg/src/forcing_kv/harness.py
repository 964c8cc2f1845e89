"""Profile / bench / chunk-discontinuity flows behind the ``fkv`` CLI."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cache import ForcingKV, FullKV, PolicyKind
from .config import RunConfig
from .engine import RunResult, run_policy
from .errors import ConfigError, VerificationError
from .metrics import FlowDiffSeries, chunk_discontinuity, naive_flow_diff, read_deltas_csv
from .profiler import HeadTypeMap, accumulate_masses, profile_heads
from .stream import PlantedStream, StreamSource, TraceStream, generate_stream
from .trace import read_trace, write_trace

log = logging.getLogger(__name__)

# --verify defaults on when the final window is at most this many tokens.
AUTO_VERIFY_TOKENS = 64


@dataclass
class RunSpec:
    run: RunConfig
    out_dir: Path
    policies: list[PolicyKind] = field(default_factory=lambda: [FullKV(), ForcingKV()])
    trace_path: Path | None = None
    head_types_path: Path | None = None
    verify: bool | None = None
    formats: tuple[str, ...] = ("json", "csv")

    def __post_init__(self) -> None:
        if not self.policies:
            raise ConfigError("at least one policy is required")
        self.out_dir = Path(self.out_dir)

    def digest(self) -> str:
        return self.run.digest()

    def source(self) -> StreamSource:
        cfg = self.run.stream
        if self.trace_path is not None:
            return TraceStream(cfg, read_trace(self.trace_path))
        return generate_stream(cfg, self.run.planted)

    def should_verify(self) -> bool:
        if self.verify is not None:
            return self.verify
        cfg = self.run.stream
        return cfg.total_frames * cfg.tokens_per_frame <= AUTO_VERIFY_TOKENS


def _fixed(x: float) -> float:
    return float(f"{x:.12g}")


def threads() -> int:
    try:
        return max(1, int(os.environ.get("FKV_THREADS", "1")))
    except ValueError:
        return 1


def profile(source: StreamSource, alpha: float) -> HeadTypeMap:
    if isinstance(source, PlantedStream):
        source.self_check(alpha)
    return profile_heads(accumulate_masses(source), alpha)


def cmd_profile(spec: RunSpec) -> Path:
    """Profile heads of the run's stream and write ``head_types.json``."""
    head_types = profile(spec.source(), spec.run.stream.alpha)
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    path = spec.out_dir / "head_types.json"
    path.write_text(head_types.to_json(), encoding="utf-8")
    return path


def bench_report(result: RunResult, digest: str) -> dict:
    per_step = [
        {
            "ar_step": r.ar_step,
            "denoise_step": r.denoise_step,
            "attended_tokens": r.attended_tokens,
            "full_tokens": r.full_tokens,
            "flops": r.flops,
            "flops_full": r.flops_full,
            "cache_bytes": r.cache_bytes,
            "cache_bytes_full": r.cache_bytes_full,
        }
        for r in result.records
    ]
    last = result.records[-1]
    report = {
        "policy": result.policy.label,
        "config_digest": digest,
        "per_step": per_step,
        "totals": {
            "flops_full": result.flops_full,
            "flops_compressed": result.flops,
            "speedup_modeled": _fixed(result.speedup),
            "cache_bytes_full": last.cache_bytes_full,
            "cache_bytes_compressed": last.cache_bytes,
            "retention_ratio": _fixed(result.retention_ratio),
        },
    }
    if result.max_abs_diff is not None:
        report["verify"] = {"max_abs_diff": _fixed(result.max_abs_diff)}
    return report


def cmd_bench(spec: RunSpec) -> list[dict]:
    """Run every policy, write one JSON report per policy and a CSV summary.

    Raises VerificationError after writing reports if any policy failed the
    masked-attention check.
    """
    source = spec.source()
    cfg = spec.run.stream
    if spec.head_types_path is not None:
        head_types = HeadTypeMap.from_json(Path(spec.head_types_path).read_text(encoding="utf-8"))
        head_types.check_covers(cfg)
    else:
        head_types = profile(source, cfg.alpha)
    verify = spec.should_verify()
    digest = spec.digest()

    def one(policy: PolicyKind):
        try:
            return bench_report(run_policy(source, policy, head_types, verify=verify), digest), None
        except VerificationError as exc:
            return {"policy": policy.label, "config_digest": digest, "verify": {"failed": str(exc)}}, exc

    with ThreadPoolExecutor(max_workers=threads()) as pool:
        outcomes = list(pool.map(one, spec.policies))

    spec.out_dir.mkdir(parents=True, exist_ok=True)
    reports = [r for r, _ in outcomes]
    if "json" in spec.formats:
        for report in reports:
            name = "bench_" + report["policy"].replace(":", "_") + ".json"
            (spec.out_dir / name).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if "csv" in spec.formats:
        write_summary_csv(spec.out_dir / "summary.csv", reports)
    failures = [exc for _, exc in outcomes if exc is not None]
    if failures:
        raise failures[0]
    return reports


SUMMARY_FIELDS = [
    "policy",
    "config_digest",
    "flops_full",
    "flops_compressed",
    "speedup_modeled",
    "cache_bytes_full",
    "cache_bytes_compressed",
    "retention_ratio",
    "max_abs_diff",
]


def write_summary_csv(path: Path, reports: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_FIELDS)
        for rep in reports:
            totals = rep.get("totals", {})
            row = [rep["policy"], rep["config_digest"]]
            row += [totals.get(k, "") for k in SUMMARY_FIELDS[2:8]]
            row.append(rep.get("verify", {}).get("max_abs_diff", ""))
            writer.writerow(row)


def load_frames(path: str | Path) -> list[np.ndarray]:
    """Frames from a trace: one ``[H, W]`` record per frame, or a single ``[T, H, W]`` record."""
    blobs = read_trace(path)
    if len(blobs) == 1 and len(blobs[0].dims) == 3:
        return list(blobs[0].to_array())
    return [b.to_array() for b in blobs]


def cmd_chunk_disc(chunks: int, deltas_csv: str | Path | None = None, frames_trace: str | Path | None = None) -> tuple[float, FlowDiffSeries]:
    if (deltas_csv is None) == (frames_trace is None):
        raise ConfigError("give exactly one of a delta CSV or a frame trace")
    if deltas_csv is not None:
        series = read_deltas_csv(str(deltas_csv), chunks)
    else:
        series = naive_flow_diff(load_frames(frames_trace), chunks)
    return chunk_discontinuity(series), series


def cmd_gen_trace(run: RunConfig, out_path: str | Path) -> int:
    stream = generate_stream(run.stream, run.planted)
    blobs = stream.blobs()
    write_trace(out_path, blobs)
    return len(blobs)
