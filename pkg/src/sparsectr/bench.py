"""Cost of sparse vs dense attention: analytic estimates, instrumented counts, timings.

The analytic expressions use unit constants: one unit per (query, key,
feature) interaction, i.e. ``B l n (|P| + m|P| + w) d`` for the sparse layer
and ``B l n^2 d`` for dense attention.  The instrumented counts come from
forward passes through the tensor library with a :class:`FlopCounter`
attached; the multiply-adds of the query-key score products are the
like-for-like counterpart of the analytic units.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .attention import BRANCHES, AttentionWeights, EvoAttentionConfig, SparseLayout, full_attention
from .block import BlockWeights, sparse_block
from .chunking import time_chunk
from .temporal import TemporalBiasParams


@dataclass
class BenchConfig:
    attention: str = "evo"
    batch: int = 1
    n: int = 1024
    num_candidates: int = 4
    d: int = 32
    num_heads: int = 8
    num_layers: int = 2
    num_chunks: int = 32
    transition_m: int = 2
    local_w: int = 16
    repeats: int = 3
    seed: int = 0

    @property
    def num_behaviors(self) -> int:
        return self.n - self.num_candidates

    def attention_config(self) -> EvoAttentionConfig:
        return EvoAttentionConfig(self.d, self.num_heads, self.num_chunks, self.transition_m, self.local_w)

    @classmethod
    def from_dict(cls, obj: dict) -> BenchConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown bench config keys: {sorted(unknown)}")
        cfg = cls(**obj)
        if cfg.attention not in ("evo", "full"):
            raise ValueError(f"attention must be 'evo' or 'full', got {cfg.attention!r}")
        if cfg.num_behaviors < 1:
            raise ValueError("n must exceed num_candidates")
        return cfg


def full_attention_reference(e_s: T.Tensor, e_b: T.Tensor, layout: SparseLayout, weights: AttentionWeights,
                             bias: T.Tensor | None = None) -> T.Tensor:
    """Dense baseline: same projections, temporal bias and masking contract, every causal key."""
    return full_attention(e_s, e_b, layout, weights, bias)


def analytic_flops(batch: int, layers: int, n: int, num_chunks: int, m: int, w: int, d: int) -> tuple[float, float]:
    """(sparse, full) interaction counts with unit constants."""
    sparse = batch * layers * (n * num_chunks * d + n * m * num_chunks * d + n * w * d)
    full = batch * layers * n * n * d
    return float(sparse), float(full)


def synthetic_times(rng: np.random.Generator, length: int, padding: int = 0) -> np.ndarray:
    """Session-like timestamps: minute-scale gaps with occasional day-scale breaks."""
    valid = length - padding
    gaps = np.where(rng.random(valid) < 0.15, rng.lognormal(np.log(36000.0), 1.0, valid), rng.exponential(90.0, valid))
    t = 1_700_000_000 + np.cumsum(np.maximum(gaps, 1.0)).astype(np.int64)
    return np.concatenate([np.zeros(padding, dtype=np.int64), t])


@dataclass
class _Setup:
    x: T.Tensor
    e_user: T.Tensor
    layout: SparseLayout
    blocks: list[BlockWeights]
    slopes: TemporalBiasParams


def _setup(cfg: BenchConfig) -> _Setup:
    rng = np.random.default_rng(cfg.seed)
    acfg = cfg.attention_config()
    length = cfg.num_behaviors
    times = np.stack([synthetic_times(rng, length, padding=int(rng.integers(0, max(1, length // 8))))
                      for _ in range(cfg.batch)])
    cand = times.max(axis=1, keepdims=True) + 3600 + np.zeros((1, cfg.num_candidates), dtype=np.int64)
    layout = SparseLayout.build(times, cand, [time_chunk(t, cfg.num_chunks) for t in times], acfg)
    user_dim = 2 * cfg.d
    return _Setup(
        x=T.Tensor(rng.normal(size=(cfg.batch, cfg.n, cfg.d))),
        e_user=T.Tensor(rng.normal(size=(cfg.batch, user_dim))),
        layout=layout,
        blocks=[BlockWeights.init(rng, acfg, user_dim) for _ in range(cfg.num_layers)],
        slopes=TemporalBiasParams.init(cfg.num_heads),
    )


def _run(setup: _Setup, attention: str) -> T.Tensor:
    wanted = ("full",) if attention == "full" else BRANCHES
    biases = setup.layout.biases(setup.slopes, wanted)
    x = setup.x
    for i, block in enumerate(setup.blocks):
        with T.flop_tag(f"block{i}"):
            x = sparse_block(x, setup.e_user, setup.layout, block, biases, attention)
    return x


@dataclass
class CountedFlops:
    total: int  # everything in the block stack
    attention: int  # attention layers only (projections, branches, gate)
    interactions: int  # multiply-adds of the query-key score products


def count_forward(cfg: BenchConfig, attention: str | None = None) -> CountedFlops:
    setup = _setup(cfg)
    with T.count_flops() as fc:
        _run(setup, attention or cfg.attention)
    attn = sum(v for k, v in fc.by_tag.items() if ".attention" in k)
    scores = sum(v for k, v in fc.by_tag.items() if k.endswith(".scores"))
    return CountedFlops(total=fc.total, attention=attn, interactions=scores // 2)


@dataclass
class FlopsEstimate:
    analytic_sparse: float
    analytic_full: float
    analytic_ratio: float
    counted_sparse: int
    counted_full: int
    counted_ratio: float
    interactions_sparse: int
    interactions_full: int

    @property
    def sparse_formula_error(self) -> float:
        """Relative gap between counted score interactions and the analytic sparse count."""
        return abs(self.interactions_sparse - self.analytic_sparse) / self.analytic_sparse

    @property
    def full_formula_error(self) -> float:
        return abs(self.interactions_full - self.analytic_full) / self.analytic_full


def flops_estimate(cfg: BenchConfig, counted: bool = True) -> FlopsEstimate:
    """Analytic and counted attention cost of the sparse layer vs dense attention."""
    sparse, full = analytic_flops(cfg.batch, cfg.num_layers, cfg.n, cfg.num_chunks, cfg.transition_m,
                                  cfg.local_w, cfg.d)
    if counted:
        cs = count_forward(cfg, "evo")
        cf = count_forward(cfg, "full")
    else:
        cs = cf = CountedFlops(0, 0, 0)
    return FlopsEstimate(
        analytic_sparse=sparse,
        analytic_full=full,
        analytic_ratio=sparse / full,
        counted_sparse=cs.attention,
        counted_full=cf.attention,
        counted_ratio=cs.attention / cf.attention if cf.attention else float("nan"),
        interactions_sparse=cs.interactions,
        interactions_full=cf.interactions,
    )


# --------------------------------------------------------------------------
# timing harness
# --------------------------------------------------------------------------

BENCH_COLUMNS = [f.name for f in fields(BenchConfig)] + [
    "median_ms", "peak_bytes", "counted_flops", "counted_attention_flops", "analytic_flops",
]


def bench_one(cfg: BenchConfig) -> dict:
    setup = _setup(cfg)
    _run(setup, cfg.attention)  # warm-up; also fills the layout caches
    timings = []
    baseline = T.memory.current
    T.memory.reset_peak()
    for _ in range(max(1, cfg.repeats)):
        t0 = time.perf_counter()
        out = _run(setup, cfg.attention)
        timings.append((time.perf_counter() - t0) * 1000.0)
        del out
    peak = T.memory.peak - baseline
    with T.count_flops() as fc:
        _run(setup, cfg.attention)
    sparse, full = analytic_flops(cfg.batch, cfg.num_layers, cfg.n, cfg.num_chunks, cfg.transition_m,
                                  cfg.local_w, cfg.d)
    row = asdict(cfg)
    row.update(
        median_ms=statistics.median(timings),
        peak_bytes=int(peak),
        counted_flops=fc.total,
        counted_attention_flops=sum(v for k, v in fc.by_tag.items() if ".attention" in k),
        analytic_flops=sparse if cfg.attention == "evo" else full,
    )
    return row


def bench(grid: list[BenchConfig], single_thread: bool = True) -> list[dict]:
    """Run each configuration in turn; one result row per configuration."""
    if single_thread:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=1):
            return [bench_one(c) for c in grid]
    return [bench_one(c) for c in grid]


def default_grid() -> list[BenchConfig]:
    grid = []
    for n in (256, 512, 1024):
        grid.append(BenchConfig(attention="full", n=n))
        for p, m, w in ((16, 2, 16), (32, 2, 16), (32, 4, 32)):
            grid.append(BenchConfig(attention="evo", n=n, num_chunks=p, transition_m=m, local_w=w))
    return grid


def write_bench_csv(rows: list[dict], path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r)
