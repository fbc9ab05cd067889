"""Depth and batch-size timing sweeps, fused versus layer-by-layer."""

from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import astuple, dataclass, fields
from typing import Callable, Iterable, TextIO

import numpy as np

from .fusion import ConformalSequence
from .homogeneous import AllocationCounter
from .netspec import NetworkSpec, d3modnet_spec, dknet_spec
from .reference import sequential_forward

log = logging.getLogger(__name__)

__all__ = [
    "CSV_HEADER",
    "BenchRecord",
    "BenchmarkError",
    "median_ns",
    "max_relative_error",
    "bench_network",
    "bench_depth",
    "bench_batch",
    "write_csv",
]

VERIFY_RTOL = 1e-9


class BenchmarkError(RuntimeError):
    pass


@dataclass(frozen=True)
class BenchRecord:
    mode: str
    k: int
    batch: int
    reps: int
    median_ns: int
    buffers: int
    elements: int  # intermediate elements per image
    nnz_LM: int
    nnz_Q: int


CSV_HEADER = [f.name for f in fields(BenchRecord)]


def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Largest per-sample ``max|a - b| / max|b|`` (absolute when ``b`` is zero)."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    num = np.abs(a - b).max(axis=1)
    den = np.abs(b).max(axis=1)
    den = np.where(den > 0, den, 1.0)
    return float((num / den).max())


def median_ns(fn: Callable[[], object], reps: int, warmup: int = 1) -> int:
    if reps < 5:
        raise ValueError("at least 5 repetitions are required")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return max(1, int(statistics.median(samples)))


def bench_network(
    net: NetworkSpec,
    k: int,
    batch: int,
    reps: int,
    rng: np.random.Generator,
    seq: ConformalSequence | None = None,
    float32: bool = False,
) -> list[BenchRecord]:
    """Time fused and sequential inference of ``net`` on a random batch.

    The cache is built (and its build time logged) before timing; outputs of
    both paths are checked against each other first.
    """
    seq = seq or ConformalSequence(net)
    if not seq.is_valid():
        t0 = time.perf_counter_ns()
        seq.build_cache()
        log.info("k=%d: cache built in %.3f ms (nnz L_M=%d, Q=%d)",
                 k, (time.perf_counter_ns() - t0) / 1e6, *seq.cache.nnz)
    cache = seq.cache

    x = rng.uniform(0.0, 1.0, size=(batch, net.d_in))
    alphas = seq.alphas
    fused = seq.forward(x)
    ref = sequential_forward(net, x, alphas=alphas)
    err = max_relative_error(fused, ref)
    if err > VERIFY_RTOL:
        raise BenchmarkError(f"fused and sequential outputs differ (max relative error {err:.3e})")

    if float32:
        from .fusion import fused_forward_batch
        from .homogeneous import Batch

        cache32 = cache.astype(np.float32)
        b32 = Batch(Batch.encode(x, net.encoding).coeffs.astype(np.float32))

        def run_fused():
            return fused_forward_batch(cache32, b32).decode()
    else:
        def run_fused():
            return seq.forward(x)

    fc, sc = AllocationCounter(), AllocationCounter()
    seq.forward(x, counter=fc)
    sequential_forward(net, x, alphas=alphas, counter=sc)

    nnz_lm, nnz_q = cache.nnz
    return [
        BenchRecord("fused", k, batch, reps, median_ns(run_fused, reps),
                    fc.feature_map_buffers, fc.feature_map_elements // batch, nnz_lm, nnz_q),
        BenchRecord("sequential", k, batch, reps,
                    median_ns(lambda: sequential_forward(net, x, alphas=alphas), reps),
                    sc.feature_map_buffers, sc.feature_map_elements // batch, 0, 0),
    ]


def bench_depth(
    k_list: Iterable[int],
    reps: int = 11,
    *,
    batch: int = 64,
    size: int = 3,
    channels: int = 8,
    seed: int = 0,
    float32: bool = False,
) -> list[BenchRecord]:
    k_list = list(k_list)
    if not k_list:
        raise ValueError("k_list must be non-empty")
    rng = np.random.default_rng(seed)
    records = []
    for k in k_list:
        net = dknet_spec(k, size=size, channels=channels, seed=seed + k)
        records += bench_network(net, k, batch, reps, rng, float32=float32)
    return records


def bench_batch(
    sizes: Iterable[int],
    reps: int = 11,
    *,
    stages: int = 3,
    size: int = 16,
    channels: int = 8,
    seed: int = 0,
    float32: bool = False,
) -> list[BenchRecord]:
    sizes = list(sizes)
    if not sizes:
        raise ValueError("sizes must be non-empty")
    rng = np.random.default_rng(seed)
    net = d3modnet_spec(stages=stages, size=size, channels=channels, seed=seed)
    seq = ConformalSequence(net)
    records = []
    for n in sizes:
        records += bench_network(net, len(net.layers), n, reps, rng, seq=seq, float32=float32)
    return records


def write_csv(records: Iterable[BenchRecord], out: TextIO) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow(astuple(r))
