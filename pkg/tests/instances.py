"""Random small inputs shared by several test modules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sparsectr import tensor as T
from sparsectr.attention import AttentionWeights, EvoAttentionConfig, SparseLayout
from sparsectr.chunking import time_chunk
from sparsectr.temporal import TemporalBiasParams

GAP_CHOICES = np.array([0, 1, 2, 7, 60, 600, 3600, 5 * 3600, 86400, 3 * 86400 + 17, 9 * 86400])


def random_times(rng: np.random.Generator, length: int, padding: int, start=None) -> np.ndarray:
    """Sorted positive timestamps after a zero prefix; gaps include ties and day-scale jumps."""
    valid = length - padding
    base = int(start if start is not None else 1_700_000_000 + rng.integers(0, 14 * 86400))
    gaps = rng.choice(GAP_CHOICES, size=max(valid - 1, 0)) + rng.integers(0, 3, size=max(valid - 1, 0))
    t = base + np.concatenate([[0], np.cumsum(gaps)]) if valid > 0 else np.zeros(0, dtype=np.int64)
    return np.concatenate([np.zeros(padding, dtype=np.int64), np.asarray(t, dtype=np.int64)])


@dataclass
class Instance:
    cfg: EvoAttentionConfig
    layout: SparseLayout
    e_s: T.Tensor  # [1, n, d]
    e_user: T.Tensor  # [1, u]
    weights: AttentionWeights
    slopes: TemporalBiasParams
    behavior_times: np.ndarray
    candidate_times: np.ndarray

    @property
    def num_behaviors(self) -> int:
        return len(self.behavior_times)

    def e_b(self, e_s=None) -> T.Tensor:
        x = self.e_s if e_s is None else e_s
        return T.getitem(x, (slice(None), slice(0, self.num_behaviors)))

    def weight_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in vars(self.weights).items()}

    def slope_arrays(self):
        return self.slopes.s1.data, self.slopes.s2.data, self.slopes.s3.data


def tiny_instance(rng: np.random.Generator, branches=(True, True, True), terms=(True, True, True)) -> Instance:
    heads = int(rng.integers(1, 3))
    d = heads * int(rng.integers(1, 4))
    length = int(rng.integers(1, 11))
    num_cand = int(rng.integers(1, 4))
    padding = int(rng.integers(0, length + 1))
    cfg = EvoAttentionConfig(d, heads, int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 5)),
                             branches)
    bt = random_times(rng, length, padding)
    last = int(bt.max()) if padding < length else 1_700_000_000
    ct = last + rng.integers(1, 3 * 86400, size=num_cand)
    layout = SparseLayout.build(bt[None], ct[None], [time_chunk(bt, cfg.num_chunks)], cfg)
    user_dim = d * int(rng.integers(1, 3))
    slopes = TemporalBiasParams(*(T.parameter(rng.uniform(0.05, 1.5, heads)) for _ in range(3)), terms=terms)
    return Instance(
        cfg=cfg,
        layout=layout,
        e_s=T.parameter(rng.normal(size=(1, length + num_cand, d))),
        e_user=T.parameter(rng.normal(size=(1, user_dim))),
        weights=AttentionWeights.init(rng, cfg, user_dim),
        slopes=slopes,
        behavior_times=bt,
        candidate_times=ct,
    )
