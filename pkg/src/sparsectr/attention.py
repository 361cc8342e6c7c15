"""Three-branch sparse attention over a behavior sequence followed by candidates.

The mixed sequence has ``n = L + C`` rows: ``L`` behaviors (padded prefix)
then ``C`` candidates.  Keys and values come from the behavior rows only, so
candidates are queries but never attended.  Per head, each query gets

* global:     attention over per-chunk aggregated keys/values,
* transition: attention over the last ``m`` behaviors of every chunk,
* local:      attention over a compressed user vector plus the last ``w`` behaviors,

and a learned gate mixes the three outputs.  All index sets and masks
depend only on timestamps, so they are computed once per batch in
:class:`SparseLayout` and shared by every block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import tensor as T
from .chunking import ChunkPartition, transition_slots
from .temporal import (
    TemporalBiasParams,
    TemporalFeatures,
    bias_from_features,
    bucket_array,
    hour_sine_array,
    temporal_features,
    weekend_array,
)
from .tensor import Tensor, flop_tag

BRANCHES = ("global", "transition", "local")


@dataclass(frozen=True)
class EvoAttentionConfig:
    d: int
    num_heads: int
    num_chunks: int
    transition_m: int
    local_w: int
    branches: tuple[bool, bool, bool] = (True, True, True)

    def __post_init__(self):
        if self.d < 1 or self.num_heads < 1 or self.d % self.num_heads:
            raise ValueError(f"d={self.d} must be a positive multiple of num_heads={self.num_heads}")
        if self.num_chunks < 1 or self.transition_m < 1 or self.local_w < 1:
            raise ValueError("num_chunks, transition_m and local_w must all be >= 1")
        if not any(self.branches):
            raise ValueError("at least one attention branch must be enabled")

    @property
    def head_dim(self) -> int:
        return self.d // self.num_heads


@dataclass
class AttentionWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    agg_k1: Tensor
    agg_k2: Tensor
    agg_v1: Tensor
    agg_v2: Tensor
    w_gate: Tensor  # [H, 3 * head_dim, 3]
    w_o: Tensor
    user_w1: Tensor  # [|U| * d, d]
    user_w2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: EvoAttentionConfig, user_dim: int) -> AttentionWeights:
        d, h, dh = cfg.d, cfg.num_heads, cfg.head_dim
        sq = lambda: T.glorot(rng, d, d)  # noqa: E731
        return cls(
            w_q=sq(), w_k=sq(), w_v=sq(),
            agg_k1=sq(), agg_k2=sq(), agg_v1=sq(), agg_v2=sq(),
            w_gate=T.parameter(rng.normal(0.0, 1.0 / math.sqrt(3 * dh), size=(h, 3 * dh, 3))),
            w_o=sq(),
            user_w1=T.glorot(rng, user_dim, d),
            user_w2=sq(),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


# --------------------------------------------------------------------------
# layout
# --------------------------------------------------------------------------


@dataclass
class SparseLayout:
    """Index sets, masks and temporal features for one batch.

    Masks are shaped [N, 1, n, K] so they broadcast over heads.
    """

    behavior_times: np.ndarray  # [N, L]
    query_times: np.ndarray  # [N, n]
    partitions: list[ChunkPartition]
    cfg: EvoAttentionConfig

    @classmethod
    def build(cls, behavior_times, candidate_times, partitions, cfg: EvoAttentionConfig) -> SparseLayout:
        bt = np.asarray(behavior_times, dtype=np.int64)
        ct = np.asarray(candidate_times, dtype=np.int64)
        if bt.ndim != 2 or ct.ndim != 2 or bt.shape[0] != ct.shape[0]:
            raise ValueError(f"times must be [N, L] and [N, C], got {bt.shape} and {ct.shape}")
        if len(partitions) != bt.shape[0]:
            raise ValueError("need one partition per sequence")
        for p in partitions:
            if p.num_chunks != cfg.num_chunks or p.length != bt.shape[1]:
                raise ValueError(f"partition does not match num_chunks={cfg.num_chunks}, L={bt.shape[1]}")
        return cls(bt, np.concatenate([bt, ct], axis=1), list(partitions), cfg)

    @property
    def batch(self) -> int:
        return self.behavior_times.shape[0]

    @property
    def num_behaviors(self) -> int:
        return self.behavior_times.shape[1]

    @property
    def n(self) -> int:
        return self.query_times.shape[1]

    @cached_property
    def padding(self) -> np.ndarray:
        return np.array([len(p.padding) for p in self.partitions], dtype=np.int64)

    @cached_property
    def _positions(self):
        q = np.arange(self.n)
        return q, q >= self.num_behaviors

    # global ---------------------------------------------------------------

    @cached_property
    def chunk_ids(self) -> np.ndarray:
        return np.stack([p.chunk_ids() for p in self.partitions])

    @cached_property
    def chunk_nonempty(self) -> np.ndarray:
        return np.stack([p.nonempty() for p in self.partitions])

    @cached_property
    def chunk_mean_time(self) -> np.ndarray:
        return np.array([p.chunk_mean_time[1:] for p in self.partitions], dtype=np.float64)

    @cached_property
    def global_mask(self) -> np.ndarray:
        qpos, is_cand = self._positions
        last = np.stack([p.last_index() for p in self.partitions])
        done = (last[:, None, :] <= qpos[None, :, None]) | is_cand[None, :, None]
        return (self.chunk_nonempty[:, None, :] & done)[:, None]

    @cached_property
    def global_features(self) -> TemporalFeatures:
        return temporal_features(self.query_times, self.chunk_mean_time)

    # transition ------------------------------------------------------------

    @cached_property
    def _transition(self):
        pairs = [transition_slots(p, self.cfg.transition_m) for p in self.partitions]
        return np.stack([i for i, _ in pairs]), np.stack([v for _, v in pairs])

    @property
    def transition_index(self) -> np.ndarray:
        return self._transition[0]

    @cached_property
    def transition_mask(self) -> np.ndarray:
        index, valid = self._transition
        qpos, is_cand = self._positions
        causal = (index[:, None, :] <= qpos[None, :, None]) | is_cand[None, :, None]
        return (valid[:, None, :] & causal)[:, None]

    @cached_property
    def transition_features(self) -> TemporalFeatures:
        key_times = np.take_along_axis(self.behavior_times, self.transition_index, axis=1)
        return temporal_features(self.query_times, key_times)

    # local ------------------------------------------------------------------

    @cached_property
    def _local(self):
        w, length = self.cfg.local_w, self.num_behaviors
        qpos, is_cand = self._positions
        end = np.where(is_cand, length - 1, qpos)
        pos = end[:, None] - (w - 1) + np.arange(w)[None, :]  # [n, w]
        valid = (pos[None] >= 0) & (pos[None] >= self.padding[:, None, None])  # [N, n, w]
        index = np.broadcast_to(np.clip(pos, 0, length - 1), valid.shape).copy()
        return index, valid

    @property
    def local_index(self) -> np.ndarray:
        """[N, n, w] behavior positions of each query's window."""
        return self._local[0]

    @cached_property
    def local_mask(self) -> np.ndarray:
        """[N, 1, n, w + 1]; slot 0 is the compressed user vector, always visible."""
        valid = self._local[1]
        user = np.ones(valid.shape[:2] + (1,), dtype=bool)
        return np.concatenate([user, valid], axis=-1)[:, None]

    @cached_property
    def local_features(self) -> TemporalFeatures:
        index = self.local_index
        n_batch = self.batch
        key_times = self.behavior_times[np.arange(n_batch)[:, None, None], index].astype(np.float64)
        q = self.query_times.astype(np.float64)[..., None]
        f = _elementwise_features(q, key_times)
        # the user slot gets no temporal bias
        pad = lambda a: np.concatenate([np.zeros(a.shape[:2] + (1,)), a], axis=-1)  # noqa: E731
        return TemporalFeatures(pad(f.bucket), pad(f.hour), pad(f.weekend))

    # full (dense reference) ---------------------------------------------------

    @cached_property
    def full_mask(self) -> np.ndarray:
        qpos, is_cand = self._positions
        kpos = np.arange(self.num_behaviors)
        causal = (kpos[None, :] <= qpos[:, None]) | is_cand[:, None]  # [n, L]
        valid = kpos[None, :] >= self.padding[:, None]  # [N, L]
        return (causal[None] & valid[:, None, :])[:, None]

    @cached_property
    def full_features(self) -> TemporalFeatures:
        return temporal_features(self.query_times, self.behavior_times)

    # biases -------------------------------------------------------------------

    def biases(self, params: TemporalBiasParams, branches=BRANCHES) -> dict[str, Tensor]:
        """Differentiable per-branch biases [N, H, n, K] for the given slopes."""
        with flop_tag("bias"):
            return {name: bias_from_features(getattr(self, f"{name}_features"), params) for name in branches}


def _elementwise_features(q: np.ndarray, k: np.ndarray) -> TemporalFeatures:
    delta = np.abs(q - k)
    return TemporalFeatures(
        bucket_array(delta),
        hour_sine_array(delta),
        (weekend_array(q) != weekend_array(k)).astype(np.float64),
    )


# --------------------------------------------------------------------------
# branch operations
# --------------------------------------------------------------------------


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """[N, s, d] -> [N, H, s, d/H]."""
    n, s, d = x.shape
    return T.transpose(T.reshape(x, (n, s, num_heads, d // num_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    n, h, s, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (n, s, h * dh))


def attend(q: Tensor, k: Tensor, v: Tensor, mask, bias: Tensor | None) -> Tensor:
    """softmax(q k^T / sqrt(dh) + bias) v over the last two axes, with masking."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    with flop_tag("scores"):
        logits = T.matmul(q, T.swapaxes(k, -1, -2))
    logits = T.mul(logits, scale)
    if bias is not None:
        logits = T.add(logits, bias)
    weights = T.softmax_masked(logits, mask)
    with flop_tag("mix"):
        return T.matmul(weights, v)


def project_qkv(e_s: Tensor, e_b: Tensor, weights: AttentionWeights) -> tuple[Tensor, Tensor, Tensor]:
    if e_s.shape[-1] != weights.w_q.shape[0] or e_b.shape[-1] != weights.w_k.shape[0]:
        raise T.ShapeError(f"project_qkv: inputs {e_s.shape}, {e_b.shape} vs width {weights.w_q.shape[0]}")
    return T.matmul(e_s, weights.w_q), T.matmul(e_b, weights.w_k), T.matmul(e_b, weights.w_v)


def _mlp(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    return T.matmul(T.swish(T.matmul(x, w1)), w2)


def aggregate_chunks(k: Tensor, v: Tensor, layout: SparseLayout, weights: AttentionWeights) -> tuple[Tensor, Tensor]:
    """Chunk-level keys/values: mean over members, then a one-hidden-layer swish MLP.

    Empty chunks come out as zero rows.
    """
    p = layout.cfg.num_chunks
    keep = T.Tensor(layout.chunk_nonempty[..., None].astype(np.float64))
    k_p = _mlp(T.mean_pool(k, layout.chunk_ids, p), weights.agg_k1, weights.agg_k2)
    v_p = _mlp(T.mean_pool(v, layout.chunk_ids, p), weights.agg_v1, weights.agg_v2)
    return T.mul(k_p, keep), T.mul(v_p, keep)


def global_branch(q_heads: Tensor, k_p: Tensor, v_p: Tensor, mask, bias: Tensor | None) -> Tensor:
    h = q_heads.shape[1]
    return attend(q_heads, split_heads(k_p, h), split_heads(v_p, h), mask, bias)


def transition_branch(q_heads: Tensor, k: Tensor, v: Tensor, index, mask, bias: Tensor | None) -> Tensor:
    h = q_heads.shape[1]
    k_t = T.gather(k, index)
    v_t = T.gather(v, index)
    return attend(q_heads, split_heads(k_t, h), split_heads(v_t, h), mask, bias)


def compress_user(e_user: Tensor, weights: AttentionWeights) -> Tensor:
    """User feature vector [N, |U| d] -> [N, d]."""
    return _mlp(e_user, weights.user_w1, weights.user_w2)


def _window_heads(x: Tensor, num_heads: int) -> Tensor:
    """[N, n, K, d] -> [N, H, n, K, dh]."""
    n, s, kk, d = x.shape
    return T.transpose(T.reshape(x, (n, s, kk, num_heads, d // num_heads)), (0, 3, 1, 2, 4))


def local_branch(q_heads: Tensor, k: Tensor, v: Tensor, u_c: Tensor, layout: SparseLayout,
                 weights: AttentionWeights, bias: Tensor | None) -> Tensor:
    """Windowed attention; each query's keys are the user vector then its last ``w`` behaviors."""
    n_batch, h, n, dh = q_heads.shape
    index = layout.local_index
    w = index.shape[-1]
    d = k.shape[-1]

    def keys(x: Tensor, proj: Tensor) -> Tensor:
        user = T.broadcast_to(T.reshape(T.matmul(u_c, proj), (n_batch, 1, 1, d)), (n_batch, n, 1, d))
        return _window_heads(T.concat([user, T.gather(x, index)], axis=2), h)

    k_l, v_l = keys(k, weights.w_k), keys(v, weights.w_v)  # [N, H, n, w+1, dh]
    q5 = T.reshape(q_heads, (n_batch, h, n, 1, dh))
    bias5 = None if bias is None else T.reshape(bias, (n_batch, h, n, 1, w + 1))
    out = attend(q5, k_l, v_l, layout.local_mask[:, :, :, None, :], bias5)
    return T.reshape(out, (n_batch, h, n, dh))


def fuse_branches(outputs: list[Tensor | None], w_gate: Tensor) -> tuple[Tensor, Tensor]:
    """Gate per head and position: softmax([g, t, l] W_gate) weighted sum.

    ``outputs`` are [N, H, n, dh] tensors (None for a disabled branch, which
    is excluded from the softmax).  Returns (fused, alpha[N, H, n, 3]).
    """
    ref = next(o for o in outputs if o is not None)
    zeros = T.Tensor(np.zeros(ref.shape))
    filled = [o if o is not None else zeros for o in outputs]
    enabled = np.array([o is not None for o in outputs])
    n_batch, h, n, dh = ref.shape
    if w_gate.shape != (h, 3 * dh, 3):
        raise T.ShapeError(f"fuse_branches: gate {w_gate.shape}, expected {(h, 3 * dh, 3)}")
    cat = T.concat(filled, axis=-1)  # [N, H, n, 3 dh]
    alpha = T.softmax_masked(T.matmul(cat, T.reshape(w_gate, (1, h, 3 * dh, 3))), enabled)
    fused = None
    for i, o in enumerate(outputs):
        if o is None:
            continue
        term = T.mul(T.getitem(alpha, (Ellipsis, slice(i, i + 1))), o)
        fused = term if fused is None else T.add(fused, term)
    return fused, alpha


def evo_attention(e_s: Tensor, e_b: Tensor, e_user: Tensor, layout: SparseLayout,
                  weights: AttentionWeights, biases: dict[str, Tensor] | None = None,
                  return_alpha: bool = False):
    """Sparse multi-head attention layer: [N, n, d] -> [N, n, d]."""
    cfg = layout.cfg
    n_batch, n, d = e_s.shape
    if d != cfg.d or n != layout.n or e_b.shape != (n_batch, layout.num_behaviors, d):
        raise T.ShapeError(
            f"evo_attention: E_S {e_s.shape}, E_B {e_b.shape} do not match layout n={layout.n}, "
            f"L={layout.num_behaviors}, d={cfg.d}"
        )
    biases = biases or {}
    h = cfg.num_heads
    with flop_tag("proj"):
        q, k, v = project_qkv(e_s, e_b, weights)
        qh = split_heads(q, h)
    use_g, use_t, use_l = cfg.branches
    out_g = out_t = out_l = None
    if use_g:
        with flop_tag("global"):
            k_p, v_p = aggregate_chunks(k, v, layout, weights)
            out_g = global_branch(qh, k_p, v_p, layout.global_mask, biases.get("global"))
    if use_t:
        with flop_tag("transition"):
            out_t = transition_branch(qh, k, v, layout.transition_index, layout.transition_mask,
                                      biases.get("transition"))
    if use_l:
        with flop_tag("local"):
            u_c = compress_user(e_user, weights)
            out_l = local_branch(qh, k, v, u_c, layout, weights, biases.get("local"))
    with flop_tag("gate"):
        fused, alpha = fuse_branches([out_g, out_t, out_l], weights.w_gate)
    with flop_tag("proj"):
        out = T.matmul(merge_heads(fused), weights.w_o)
    return (out, alpha) if return_alpha else out


def full_attention(e_s: Tensor, e_b: Tensor, layout: SparseLayout, weights: AttentionWeights,
                   bias: Tensor | None = None) -> Tensor:
    """Dense causal multi-head attention over every non-padding behavior key."""
    n_batch, n, d = e_s.shape
    if d != layout.cfg.d or n != layout.n or e_b.shape != (n_batch, layout.num_behaviors, d):
        raise T.ShapeError(f"full_attention: E_S {e_s.shape}, E_B {e_b.shape} do not match layout")
    h = layout.cfg.num_heads
    with flop_tag("proj"):
        q, k, v = project_qkv(e_s, e_b, weights)
    with flop_tag("full"):
        out = attend(split_heads(q, h), split_heads(k, h), split_heads(v, h), layout.full_mask, bias)
    with flop_tag("proj"):
        return T.matmul(merge_heads(out), weights.w_o)
