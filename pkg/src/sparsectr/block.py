"""Pre-norm block: RMSNorm -> attention -> residual, RMSNorm -> SwiGLU FFN -> residual."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionWeights, EvoAttentionConfig, SparseLayout, evo_attention, full_attention
from .tensor import Tensor, flop_tag


@dataclass
class BlockWeights:
    norm1: Tensor
    norm2: Tensor
    attn: AttentionWeights
    ffn_w1: Tensor  # [d, 3d]
    ffn_w2: Tensor  # [d, 3d]
    ffn_w3: Tensor  # [3d, d]

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: EvoAttentionConfig, user_dim: int) -> BlockWeights:
        d = cfg.d
        return cls(
            norm1=T.parameter(np.ones(d)),
            norm2=T.parameter(np.ones(d)),
            attn=AttentionWeights.init(rng, cfg, user_dim),
            ffn_w1=T.glorot(rng, d, 3 * d),
            ffn_w2=T.glorot(rng, d, 3 * d),
            ffn_w3=T.glorot(rng, 3 * d, d),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.norm1": self.norm1, f"{prefix}.norm2": self.norm2}
        out.update(self.attn.named(f"{prefix}.attn"))
        out.update({f"{prefix}.ffn_w1": self.ffn_w1, f"{prefix}.ffn_w2": self.ffn_w2, f"{prefix}.ffn_w3": self.ffn_w3})
        return out


def ffn(x: Tensor, w1: Tensor, w2: Tensor, w3: Tensor) -> Tensor:
    """(swish(x W1) * (x W2)) W3."""
    return T.matmul(T.mul(T.swish(T.matmul(x, w1)), T.matmul(x, w2)), w3)


def sparse_block(x: Tensor, e_user: Tensor, layout: SparseLayout, weights: BlockWeights,
                 biases: dict[str, Tensor] | None = None, attention: str = "evo") -> Tensor:
    """One block over the mixed sequence x [N, n, d].

    ``attention="full"`` swaps the sparse layer for dense causal attention
    (same projections, same temporal bias) for comparison runs.
    """
    length = layout.num_behaviors
    h = T.rmsnorm(x, weights.norm1)
    h_b = T.getitem(h, (slice(None), slice(0, length)))
    with flop_tag("attention"):
        if attention == "evo":
            att = evo_attention(h, h_b, e_user, layout, weights.attn, biases)
        elif attention == "full":
            att = full_attention(h, h_b, layout, weights.attn, (biases or {}).get("full"))
        else:
            raise ValueError(f"unknown attention kind {attention!r}")
    y = T.add(x, att)
    with flop_tag("ffn"):
        return T.add(y, ffn(T.rmsnorm(y, weights.norm2), weights.ffn_w1, weights.ffn_w2, weights.ffn_w3))
