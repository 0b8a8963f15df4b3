"""Analytic cost model and wall-clock/peak-memory profiling of attention variants.

One profiled step = forward + backward + optimizer update of a single
attention layer on a random sequence, which keeps the scaling signal clean
of unrelated model costs. Timing uses the median over >= 5 repetitions
after warm-up; the measured region is pinned to one BLAS thread when
threadpoolctl is available. Peak memory is sampled with tracemalloc (numpy
buffers are traced) in a separate pass so the instrumentation never
pollutes the timings.
"""

from __future__ import annotations

import csv
import math
import time
import tracemalloc
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

from .attention import AttentionParams, full_attention, sliding_window_attention
from .errors import ConfigError
from .model import AdamW
from .se_attn import SEAttnConfig, se_attn_forward
from .tensor import Tensor, backward, mul, sum_all

PROFILE_CSV_FIELDS = ("variant", "L", "M", "S", "k", "median_s", "min_s", "max_s", "peak_bytes", "analytic_ops")

VARIANT_NAMES = ("full", "sw", "nomem", "se")


@dataclass
class CostModelInput:
    variant: str
    L: int
    M: int = 0
    S: int = 0
    k: int = 0
    d_model: int = 1
    window: int = 0

    def __post_init__(self):
        if self.variant not in VARIANT_NAMES:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.L < 1 or self.d_model < 1:
            raise ConfigError("L and d_model must be positive")
        if self.variant in ("se", "nomem") and (self.M < 1 or self.S < 1):
            raise ConfigError("chunked variants need M and S")
        if self.variant == "sw" and self.window < 1:
            raise ConfigError("sw needs a window")


@dataclass
class CostEstimate:
    ops: float
    bound_ok: bool = True  # the S*k <= M assumption behind the chunk-stage bound
    note: str = ""


def analytic_cost(inp, include_topk_sort=False):
    """Multiply-accumulate count per variant, constants fixed at 1.

    The span-expanded cost is the sum of its three stages: block
    summarization d*L*S, relevancy scoring d*L^2/S, and chunk attention
    d*L*M. The optional sorting term (L/M)*(L/S)*log2(L/S) is not part of
    the published bound and stays off by default.
    """
    d, L = float(inp.d_model), float(inp.L)
    if inp.variant == "full":
        return CostEstimate(ops=d * L * L)
    if inp.variant == "sw":
        return CostEstimate(ops=d * L * min(inp.window, inp.L))
    if inp.variant == "nomem":
        return CostEstimate(ops=d * L * inp.M)
    ops = d * (L * inp.S + L * inp.M + L * L / inp.S)
    note = ""
    if include_topk_sort and L > inp.S:
        blocks = L / inp.S
        ops += (L / inp.M) * blocks * math.log2(blocks)
        note = "includes top-k sort term"
    bound_ok = inp.S * inp.k <= inp.M
    if not bound_ok:
        note = (note + "; " if note else "") + "S*k >= M violates the chunk-stage bound assumption"
    return CostEstimate(ops=ops, bound_ok=bound_ok, note=note)


@dataclass
class ProfileRecord:
    variant: str
    L: int
    M: int
    S: int
    k: int
    median_s: float
    min_s: float
    max_s: float
    peak_bytes: int
    reps: int
    analytic_ops: float
    oom: bool = False

    def csv_row(self):
        return {
            "variant": self.variant,
            "L": self.L,
            "M": self.M,
            "S": self.S,
            "k": self.k,
            "median_s": f"{self.median_s:.6f}",
            "min_s": f"{self.min_s:.6f}",
            "max_s": f"{self.max_s:.6f}",
            "peak_bytes": self.peak_bytes,
            "analytic_ops": f"{self.analytic_ops:.0f}",
        }


def _single_thread_region():
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1)
    except ImportError:  # measure as-is; medians stay robust
        return nullcontext()


def _make_step(variant, L, d, d_model, heads, M, S, k, window, seed):
    params = AttentionParams.random(d, d_model, head_count=heads, seed=seed, dtype=np.float32, requires_grad=True)
    rng = np.random.default_rng(seed + 1)
    x = Tensor(rng.standard_normal((L, d)).astype(np.float32))
    opt = AdamW(params.matrices(), lr=1e-4)
    se_cfg = None
    if variant in ("se", "nomem"):
        se_cfg = SEAttnConfig(
            chunk_sizes=(min(M, L),),
            memory_block_size=min(S, L),
            top_k=k if variant == "se" else 0,
            variant="standard" if variant == "se" else "nomem",
            seed=seed,
        )

    def one_step(step_index):
        opt.zero_grad()
        if variant == "full":
            out = full_attention(x, params, causal=True)
        elif variant == "sw":
            out = sliding_window_attention(x, params, window=window)
        else:
            out, _ = se_attn_forward(x, params, se_cfg, rng=np.random.default_rng([seed, step_index]))
        backward(sum_all(mul(out, out)))
        opt.step()

    return one_step


def profile_step(variant, L, d=32, d_model=32, heads=1, M=128, S=32, k=4, window=1024,
                 reps=5, warmup=1, seed=0, measure_memory=True):
    """Median/min/max wall time of one training step plus its peak heap bytes.

    Out-of-memory shows up as a capped record (NaN timings, -1 bytes)
    rather than an exception.
    """
    if reps < 5:
        raise ConfigError("profile records need at least 5 repetitions")
    inp = CostModelInput(variant=variant, L=L, M=M, S=S, k=k, d_model=d_model, window=window)
    est = analytic_cost(inp)
    try:
        one_step = _make_step(variant, L, d, d_model, heads, M, S, k, window, seed)
        with _single_thread_region():
            for i in range(warmup):
                one_step(i)
            times = []
            for i in range(reps):
                t0 = time.perf_counter()
                one_step(warmup + i)
                times.append(time.perf_counter() - t0)
        peak = 0
        if measure_memory:
            tracemalloc.start()
            tracemalloc.reset_peak()
            one_step(warmup + reps)
            _, peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
    except MemoryError:
        if tracemalloc.is_tracing():
            tracemalloc.stop()
        return ProfileRecord(
            variant=variant, L=L, M=M, S=S, k=k,
            median_s=float("nan"), min_s=float("nan"), max_s=float("nan"),
            peak_bytes=-1, reps=reps, analytic_ops=est.ops, oom=True,
        )
    return ProfileRecord(
        variant=variant, L=L, M=M, S=S, k=k,
        median_s=float(np.median(times)), min_s=float(min(times)), max_s=float(max(times)),
        peak_bytes=int(peak), reps=reps, analytic_ops=est.ops,
    )


def run_profile_grid(variants, lengths, d=32, d_model=32, heads=1, M=128, S=32, k=4,
                     window=1024, reps=5, seed=0, measure_memory=True):
    records = []
    for variant in variants:
        for L in lengths:
            records.append(
                profile_step(
                    variant, L, d=d, d_model=d_model, heads=heads, M=M, S=S, k=k,
                    window=window, reps=reps, seed=seed, measure_memory=measure_memory,
                )
            )
    return records


def write_profile_csv(path, records):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=PROFILE_CSV_FIELDS)
        writer.writeheader()
        for r in records:
            writer.writerow(r.csv_row())


def loglog_slope(lengths, times):
    """Least-squares slope of log(time) against log(L)."""
    return float(np.polyfit(np.log(np.asarray(lengths, dtype=float)), np.log(np.asarray(times, dtype=float)), 1)[0])
