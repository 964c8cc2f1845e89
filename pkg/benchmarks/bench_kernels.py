"""Time the compiled kernels against the numpy fallback.

Two kernel shapes: "small" matches the windows the engine sees in tests and
CLI runs; "large" is a long-window head where numpy's BLAS matmul dominates.
The last rows time a whole ForcingKV run end to end.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--number N]
"""

import argparse
import timeit

import numpy as np

from forcing_kv import kernels
from forcing_kv.cache import ForcingKV
from forcing_kv.config import PlantedStreamSpec, StreamConfig
from forcing_kv.engine import run_policy
from forcing_kv.profiler import HeadEntry, HeadType, HeadTypeMap
from forcing_kv.stream import generate_stream


def kernel_cases(rng, lq, lk, d, frame):
    q, k, v = rng.standard_normal((lq, d)), rng.standard_normal((lk, d)), rng.standard_normal((lk, d))
    labels = rng.integers(0, 4, lk)
    prev, new = rng.standard_normal((frame, 4 * d)), rng.standard_normal((frame, 4 * d))
    bounds = list(np.linspace(0, frame, 7).astype(int))
    sims = rng.random(6)
    return {
        "attend": lambda: kernels.attend(q, k, v),
        "region_mass": lambda: kernels.region_mass(q, k, labels, 4),
        "segment_cosine": lambda: kernels.segment_cosine(prev, new, bounds),
        "bottomk": lambda: kernels.bottomk(sims, 4),
    }


def engine_case():
    cfg = StreamConfig(
        layers=2, heads_per_layer=4, head_dim=16, frames_per_chunk=2, tokens_per_frame=12, segments_per_frame=6, ar_steps=12, denoise_steps=2
    )
    source = generate_stream(cfg, PlantedStreamSpec(seed=0))
    types = HeadTypeMap(0.8, {(l, h): HeadEntry(HeadType.DYNAMIC if h % 2 else HeadType.STATIC, 0.0) for l, h in cfg.heads})
    source.chunk(0, 0)
    return lambda: run_policy(source, ForcingKV(), types)


def time_all(cases, repeat, number):
    out = {}
    for name in kernels.BACKENDS:
        with kernels.using(name):
            for op, fn in cases.items():
                out[(op, name)] = min(timeit.repeat(fn, repeat=repeat, number=number)) / number
    return out


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--number", type=int, default=50)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    cases = {}
    for label, shape in (("small", (24, 72, 16, 12)), ("large", (48, 960, 64, 48))):
        cases.update({f"{op} [{label}]": fn for op, fn in kernel_cases(rng, *shape).items()})
    results = time_all(cases, args.repeat, args.number)
    results.update(time_all({"engine run": engine_case()}, args.repeat, max(1, args.number // 25)))
    names = list(kernels.BACKENDS)
    print(f"{'case':<24}" + "".join(f"{n + ' (us)':>16}" for n in names) + f"{'native speedup':>16}")
    for op in list(cases) + ["engine run"]:
        row = "".join(f"{results[(op, n)] * 1e6:>16.1f}" for n in names)
        ratio = f"{results[(op, 'python')] / results[(op, 'native')]:.2f}x" if "native" in names else "n/a"
        print(f"{op:<24}{row}{ratio:>16}")


if __name__ == "__main__":
    main()
