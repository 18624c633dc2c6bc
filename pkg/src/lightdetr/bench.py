"""Timing harness for the encoder layouts and for the kernel backends.

Runs are interleaved (A, B, A, B ...) after a warm-up so that slow drift in
machine state hits both sides equally.  Pin BLAS to one thread for stable
numbers, e.g. ``OPENBLAS_NUM_THREADS=1``.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import encoder as E
from . import kernels
from . import params as P
from .config import ModelConfig
from .tensor import counting

WARMUP_RUNS = 5
MIN_RUNS = 30


class LayoutMismatchError(AssertionError):
    """The two layout modes disagree; this is a layout bug, not noise."""


@dataclass(frozen=True)
class BenchRecord:
    scale: str
    layout_mode: str
    runs: int
    median_ms: float
    p10_ms: float
    p90_ms: float
    permutations: int
    matmul_flops: int

    @classmethod
    def from_times(cls, scale, mode, times, permutations, flops) -> "BenchRecord":
        ms = np.asarray(times) * 1000.0
        return cls(scale, str(mode), len(ms), float(np.median(ms)), float(np.percentile(ms, 10)),
                   float(np.percentile(ms, 90)), permutations, flops)


def expected_permutations(cfg: ModelConfig, layout_mode) -> int:
    if E.LayoutMode(layout_mode) is E.LayoutMode.WINDOW_MAJOR_OPTIMIZED:
        return 2
    return 2 * len(cfg.encoder.window_attention_indexes)


def encoder_inputs(cfg: ModelConfig, seed: int | None = None):
    """Seeded block weights and a random row-major token map at the config's grid."""
    seed = cfg.seed if seed is None else seed
    gh, gw = cfg.grid
    params = P.sub(P.init_params(E.param_spec(cfg.encoder, gh, gw), seed), "encoder")
    rng = np.random.default_rng([seed, 7])
    tokens = rng.standard_normal((gh * gw, cfg.encoder.embed_dim)).astype(np.float32)
    return E.FeatureMap(tokens, gh, gw), params


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.abs(a).max()), float(np.abs(b).max()), 1e-30)
    return float(np.abs(a.astype(np.float64) - b).max() / scale)


def bench_layouts(cfg: ModelConfig, runs: int = MIN_RUNS, warmup: int = WARMUP_RUNS,
                  tolerance: float = 1e-5) -> tuple[BenchRecord, BenchRecord]:
    """(baseline, optimized) timings of ``encoder_forward`` on identical inputs."""
    if runs < MIN_RUNS:
        raise ValueError(f"runs must be at least {MIN_RUNS}, got {runs}")
    f, params = encoder_inputs(cfg)
    modes = (E.LayoutMode.ROW_MAJOR_BASELINE, E.LayoutMode.WINDOW_MAJOR_OPTIMIZED)
    outputs, counts = {}, {}
    for mode in modes:
        with counting() as c:
            outputs[mode] = E.encoder_forward(f, cfg.encoder, params, mode).data
        counts[mode] = c
    err = relative_error(outputs[modes[0]], outputs[modes[1]])
    if not err <= tolerance:
        raise LayoutMismatchError(
            f"{cfg.scale}: layouts disagree, max relative error {err:.3e} > {tolerance:g} "
            f"(window {cfg.window}, window layers {cfg.encoder.window_attention_indexes})")
    for mode in modes:
        want = expected_permutations(cfg, mode)
        if counts[mode].permutations != want:
            raise LayoutMismatchError(
                f"{cfg.scale} {mode.value}: {counts[mode].permutations} permutations, expected {want}")
    times: dict = {m: [] for m in modes}
    for i in range(warmup + runs):
        order = modes if i % 2 == 0 else modes[::-1]
        for mode in order:
            start = time.perf_counter()
            E.encoder_forward(f, cfg.encoder, params, mode)
            elapsed = time.perf_counter() - start
            if i >= warmup:
                times[mode].append(elapsed)
    return tuple(
        BenchRecord.from_times(cfg.scale, m.value, times[m], counts[m].permutations, counts[m].matmul_flops)
        for m in modes
    )


def records_csv(records) -> str:
    buf = io.StringIO()
    rows = [asdict(r) for r in records]
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: f"{v:.4f}" if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


# ---------------------------------------------------------------- kernels

@dataclass(frozen=True)
class KernelTiming:
    kernel: str
    backend: str
    median_ms: float
    speedup: float  # python median / this median


def _kernel_cases(seed: int = 0):
    rng = np.random.default_rng(seed)
    nh, hd, q = 8, 32, 300
    shapes = np.array([[40, 40]], dtype=np.int64)
    value = rng.standard_normal((1600, nh, hd)).astype(np.float32)
    loc = rng.uniform(-0.05, 1.05, (q, nh, 1, 4, 2)).astype(np.float32)
    attn = rng.dirichlet(np.ones(4), (q, nh, 1)).astype(np.float32)
    fmap = rng.standard_normal((40, 40, 64)).astype(np.float32)
    pts = rng.uniform(0, 1, (4096, 2)).astype(np.float32)
    n = 2000
    boxes = np.concatenate([rng.uniform(0.2, 0.8, (n, 2)), rng.uniform(0.05, 0.3, (n, 2))], 1)
    scores = rng.uniform(0, 1, n)
    labels = rng.integers(0, 4, n).astype(np.int64)
    cost = rng.uniform(0, 1, (300, 40))
    return {
        "ms_deform_attn": lambda k: k.ms_deform_attn(value, shapes, np.zeros(1, np.int64), loc, attn),
        "bilinear_sample": lambda k: k.bilinear_sample(fmap, pts),
        "greedy_nms": lambda k: k.greedy_nms(boxes, scores, labels, 0.65),
        "linear_sum_assignment": lambda k: k.linear_sum_assignment(cost),
    }


def bench_kernels(runs: int = MIN_RUNS, warmup: int = WARMUP_RUNS) -> list[KernelTiming]:
    """Median time of each hot kernel under every available backend."""
    impls = kernels.backends()
    out = []
    for name, call in _kernel_cases().items():
        medians = {}
        for backend, impl in impls.items():
            for _ in range(warmup):
                call(impl)
            times = []
            for _ in range(runs):
                start = time.perf_counter()
                call(impl)
                times.append(time.perf_counter() - start)
            medians[backend] = 1000.0 * float(np.median(times))
        for backend, med in medians.items():
            out.append(KernelTiming(name, backend, med, medians["python"] / med))
    return out
