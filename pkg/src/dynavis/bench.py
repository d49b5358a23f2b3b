"""Scaling benchmark: selective backbone vs. a quadratic-attention baseline.

Both models see the same stride-4 token grid.  The baseline stacks
single-head full-attention blocks; its depth is chosen so that at the
smallest resolution both models spend about the same multiply-adds,
which makes the growth *rates* the honest comparison.  Each run records
the median wall time, the forward-pass peak-memory delta, and exact
multiply-add counts to CSV, and the report fits log-log slopes against
token count.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .nn import Conv2d, LayerNorm, Linear, Module
from .tensor import COUNTERS, Tensor

RESOLUTIONS = (64, 128, 256, 512)


class AttentionBlock(Module):
    """Pre-norm single-head self-attention with a residual connection."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.norm = LayerNorm(dim, dtype=dtype)
        self.qkv = Linear(dim, 3 * dim, rng, dtype=dtype)
        self.out = Linear(dim, dim, rng, dtype=dtype)
        self.dim = dim

    def __call__(self, x: Tensor) -> Tensor:
        d = self.dim
        u = self.norm(x)
        qkv = self.qkv(u)
        q = T.slice_axis(qkv, 2, 0, d)
        k = T.slice_axis(qkv, 2, d, 2 * d)
        v = T.slice_axis(qkv, 2, 2 * d, 3 * d)
        scores = T.div(T.matmul(q, T.transpose(k, (0, 2, 1))), math.sqrt(d))
        att = T.softmax(scores, axis=-1)
        return T.add(x, self.out(T.matmul(att, v)))


class AttentionBaseline(Module):
    """Stride-4 patch embedding followed by ``depth`` attention blocks."""

    def __init__(self, dim: int, depth: int, rng: np.random.Generator,
                 in_chans: int = 3, dtype=np.float32):
        self.patch = Conv2d(in_chans, dim, 7, rng, stride=4, dtype=dtype)
        self.blocks = [AttentionBlock(dim, rng, dtype) for _ in range(depth)]
        self.norm = LayerNorm(dim, dtype=dtype)
        self.dim, self.depth = dim, depth

    def __call__(self, x) -> Tensor:
        fm = self.patch(T.tensorize(x))
        b, c, h, w = fm.data.shape
        tok = T.transpose(T.reshape(fm, (b, c, h * w)), (0, 2, 1))
        for blk in self.blocks:
            tok = blk(tok)
        return self.norm(tok)


def _forward_madds(fn) -> int:
    with T.no_tape():
        COUNTERS.reset_madds()
        fn()
        return COUNTERS.madds


def matched_depth(selective: Backbone, dim: int, rng: np.random.Generator,
                  resolution: int = 64) -> int:
    """Baseline depth whose madds at ``resolution`` match the selective model."""
    x = np.zeros((1, 3, resolution, resolution), dtype=np.float32)
    sel = _forward_madds(lambda: selective.pyramid(selective.trunk_features(x)[0]))
    probe = AttentionBaseline(dim, 1, rng)
    one = _forward_madds(lambda: probe(x))
    stem = _forward_madds(lambda: probe.patch(T.tensorize(x)))
    per_block = one - stem
    return max(1, round((sel - stem) / per_block))


@dataclass
class BenchRecord:
    model: str
    resolution: int
    tokens: int
    latency_ms: float
    peak_bytes: int
    madds: int
    status: str

    def row(self) -> list:
        return [self.model, self.resolution, self.tokens,
                f"{self.latency_ms:.3f}", self.peak_bytes, self.madds, self.status]


BENCH_HEADER = ["model", "resolution", "tokens", "latency_ms",
                "peak_bytes", "madds", "status"]


def time_forward(fn, warmups: int = 2, repeats: int = 5) -> tuple[float, int, int]:
    """(median seconds, peak-delta bytes, madds) of a no-grad forward pass.

    The peak delta is measured against the live bytes at the start of the
    timed pass, so persistent weights don't count -- only what the pass
    itself allocates.
    """
    with T.no_tape():
        for _ in range(warmups):
            fn()
        COUNTERS.reset_madds()
        fn()
        madds = COUNTERS.madds
        base_live = COUNTERS.live_bytes
        COUNTERS.rebase_peak()
        fn()
        peak = COUNTERS.peak_bytes - base_live
        times = []
        for _ in range(repeats):
            t0 = time.monotonic()
            fn()
            times.append(time.monotonic() - t0)
    return float(np.median(times)), int(peak), int(madds)


def run_benchmark(cfg: BackboneConfig, rng: np.random.Generator,
                  resolutions=RESOLUTIONS, repeats: int = 5,
                  log=print) -> list[BenchRecord]:
    """Bench both models over the resolution sweep; OOM becomes a record."""
    selective = Backbone(cfg, rng)
    depth = matched_depth(selective, cfg.dims[0], rng)
    baseline = AttentionBaseline(cfg.dims[0], depth, rng)
    log(f"attention baseline depth: {depth} blocks of width {cfg.dims[0]}")
    records = []
    for res in resolutions:
        tokens = (res // 4) ** 2
        x = np.zeros((1, 3, res, res), dtype=np.float32)
        for name, fn in (
            ("selective", lambda: selective.pyramid(selective.trunk_features(x)[0])),
            ("attention", lambda: baseline(x)),
        ):
            try:
                sec, peak, madds = time_forward(fn, repeats=repeats)
                rec = BenchRecord(name, res, tokens, sec * 1e3, peak, madds, "ok")
            except MemoryError:
                rec = BenchRecord(name, res, tokens, float("nan"), 0, 0, "oom")
            records.append(rec)
            log(f"{name:10s} {res:4d}px {tokens:6d} tok  "
                f"{rec.latency_ms:10.2f} ms  {rec.peak_bytes/1e6:9.1f} MB  "
                f"{rec.madds/1e6:10.1f} MMAC  [{rec.status}]")
    return records


def fit_exponent(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx = np.log(np.asarray(xs, dtype=np.float64))
    ly = np.log(np.asarray(ys, dtype=np.float64))
    slope, _ = np.polyfit(lx, ly, 1)
    return float(slope)


def scaling_exponents(records: list[BenchRecord]) -> dict[str, dict[str, float]]:
    """Per model: log-log slope of madds and peak bytes against tokens."""
    out: dict[str, dict[str, float]] = {}
    for model in ("selective", "attention"):
        ok = [r for r in records if r.model == model and r.status == "ok"]
        if len(ok) < 2:
            continue
        toks = [r.tokens for r in ok]
        out[model] = {
            "madds": fit_exponent(toks, [r.madds for r in ok]),
            "peak_bytes": fit_exponent(toks, [r.peak_bytes for r in ok]),
            "latency": fit_exponent(toks, [r.latency_ms for r in ok]),
        }
    return out
