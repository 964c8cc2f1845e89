"""Drive a cache policy over a stream and collect per-step costs."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .attention import attend_masked
from .cache import CacheState, PolicyKind, apply_policy
from .errors import VerificationError
from .metrics import CostRecord, attention_flops, cache_memory_bytes
from .profiler import HeadTypeMap

VERIFY_TOL = 1e-5


@dataclass
class RunResult:
    policy: PolicyKind
    records: list[CostRecord] = field(default_factory=list)
    outputs: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    eviction_log: list[dict] = field(default_factory=list)
    max_abs_diff: float | None = None
    wall_seconds: float = 0.0

    @property
    def flops(self) -> int:
        return sum(r.flops for r in self.records)

    @property
    def flops_full(self) -> int:
        return sum(r.flops_full for r in self.records)

    @property
    def retention_ratio(self) -> float:
        return sum(r.attended_tokens for r in self.records) / sum(r.full_tokens for r in self.records)

    @property
    def speedup(self) -> float:
        return self.flops_full / self.flops


def run_policy(
    source,
    policy: PolicyKind,
    head_types: HeadTypeMap | None = None,
    verify: bool = False,
    keep_outputs: bool = False,
    tol: float = VERIFY_TOL,
) -> RunResult:
    """Run every AR and denoising step of ``source`` under ``policy``.

    With ``verify`` each step's outputs are checked against masked attention
    over the full window; a mismatch above ``tol`` raises VerificationError.
    ``keep_outputs`` stores every step's outputs keyed by (ar_step, denoise_step).
    """
    cfg = source.config
    state = CacheState(cfg, policy, head_types)
    result = RunResult(policy)
    worst = 0.0
    started = time.perf_counter()
    for i in range(cfg.ar_steps):
        for d in range(cfg.denoise_steps):
            q, k, v = source.chunk(i, d)
            if d == 0:
                state.append_chunk(k, v)
                # Nothing to compress before the second AR step.
                if i >= 1:
                    result.eviction_log.extend(state.compress_step())
            else:
                state.update_current(k, v)
            out = state.attend_step(q)
            if keep_outputs:
                result.outputs[(i, d)] = out
            full_tokens = state.window_tokens
            flops = sum(attention_flops(cfg.chunk_tokens, n, cfg.head_dim) for n in state.attended_per_head.values())
            flops_full = attention_flops(cfg.chunk_tokens, full_tokens, cfg.head_dim) * len(state.heads)
            result.records.append(
                CostRecord(
                    ar_step=i,
                    denoise_step=d,
                    attended_tokens=state.tokens_attended_last_step,
                    full_tokens=state.tokens_full_equivalent,
                    flops=flops,
                    flops_full=flops_full,
                    cache_bytes=cache_memory_bytes(state),
                    cache_bytes_full=2 * state.tokens_full_equivalent * cfg.head_dim * 4,
                )
            )
            if verify:
                worst = max(worst, _verify_step(source, state, policy, head_types, i, d, q, out))
                if worst >= tol:
                    result.max_abs_diff = worst
                    raise VerificationError(
                        f"{policy.label}: step ({i}, {d}) differs from masked attention by {worst:.3e}"
                    )
    result.wall_seconds = time.perf_counter() - started
    if verify:
        result.max_abs_diff = worst
    return result


def _verify_step(source, state: CacheState, policy, head_types, i: int, d: int, q: np.ndarray, out: np.ndarray) -> float:
    masks = apply_policy(policy, state, head_types)
    k_full, v_full = source.window_kv(i, d)
    worst = 0.0
    for (l, h), mask in masks.items():
        if not np.array_equal(mask, state.layout_mask(l, h)):
            raise VerificationError(f"{policy.label}: stored layout of head ({l}, {h}) disagrees with policy mask")
        ref = attend_masked(q[l, h], k_full[l, h], v_full[l, h], mask)
        worst = max(worst, float(np.max(np.abs(ref - out[l, h]))))
    return worst
