"""``fkv`` command line.

Exit codes: 0 success, 2 verification failure, 3 configuration error,
4 I/O or trace-format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .cache import parse_policy
from .config import PlantedStreamSpec, RunConfig
from .errors import ConfigError, FormatError, MetricError, ProfilingError, ShapeError, VerificationError
from .harness import RunSpec, cmd_bench, cmd_chunk_disc, cmd_gen_trace, cmd_profile

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO = 0, 2, 3, 4


def _load_run(args) -> RunConfig:
    run = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        data = run.to_dict()["planted"]
        data["seed"] = args.seed
        run = RunConfig(run.stream, PlantedStreamSpec.from_dict(data))
    return run


def _profile(args) -> int:
    spec = RunSpec(_load_run(args), Path(args.out), trace_path=args.trace)
    path = cmd_profile(spec)
    print(path)
    return EXIT_OK


def _bench(args) -> int:
    policies = [parse_policy(p) for p in args.policies.split(",") if p.strip()]
    spec = RunSpec(
        _load_run(args),
        Path(args.out),
        policies=policies,
        trace_path=args.trace,
        head_types_path=args.head_types,
        verify=args.verify,
    )
    try:
        reports = cmd_bench(spec)
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    for rep in reports:
        t = rep["totals"]
        print(f"{rep['policy']}: speedup_modeled={t['speedup_modeled']} retention_ratio={t['retention_ratio']}")
    return EXIT_OK


def _chunk_disc(args) -> int:
    value, series = cmd_chunk_disc(args.chunks, deltas_csv=args.deltas, frames_trace=args.frames)
    print(repr(value))
    if args.out:
        payload = {"chunk_discontinuity": value, "chunks": series.chunks, "frames": series.frames_total}
        Path(args.out).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def _gen_trace(args) -> int:
    count = cmd_gen_trace(_load_run(args), args.out)
    print(f"wrote {count} records to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fkv", description="Hybrid KV-cache compression toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="classify heads as static or dynamic")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--trace", help="read Q/K/V from a trace container instead of generating")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_profile)

    p = sub.add_parser("bench", help="run cache policies and write cost reports")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--trace")
    p.add_argument("--policies", default="full,forcing")
    p.add_argument("--head-types", help="head-type map JSON; profiled in-run when omitted")
    p.add_argument("--verify", dest="verify", action="store_true", default=None)
    p.add_argument("--no-verify", dest="verify", action="store_false")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_bench)

    p = sub.add_parser("chunk-disc", help="chunk discontinuity of a delta series or frame trace")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--deltas", help="CSV with header t,delta")
    src.add_argument("--frames", help="trace of grayscale frames")
    p.add_argument("--chunks", type=int, required=True)
    p.add_argument("--out", help="also write the value as JSON")
    p.set_defaults(func=_chunk_disc)

    p = sub.add_parser("gen-trace", help="write a planted stream as a trace container")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_gen_trace)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ProfilingError, MetricError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
