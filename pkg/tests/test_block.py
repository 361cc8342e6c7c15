from __future__ import annotations

import numpy as np
import pytest

from sparsectr import tensor as T
from sparsectr.block import BlockWeights, ffn, sparse_block
from instances import tiny_instance
from oracles import finite_difference


def make_block(seed=0):
    rng = np.random.default_rng(seed)
    inst = tiny_instance(rng)
    block = BlockWeights.init(rng, inst.cfg, inst.e_user.shape[1])
    block.norm1.data[:] = rng.uniform(0.5, 1.5, inst.cfg.d)
    block.norm2.data[:] = rng.uniform(0.5, 1.5, inst.cfg.d)
    return inst, block


def run(inst, block, attention="evo", x=None):
    wanted = ("full",) if attention == "full" else ("global", "transition", "local")
    return sparse_block(inst.e_s if x is None else x, inst.e_user, inst.layout, block,
                        inst.layout.biases(inst.slopes, wanted), attention)


class TestBlock:
    def test_ffn_formula(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 4))
        w1, w2, w3 = rng.normal(size=(4, 12)), rng.normal(size=(4, 12)), rng.normal(size=(12, 4))
        a = x @ w1
        ref = (a / (1 + np.exp(-a)) * (x @ w2)) @ w3
        out = ffn(*(T.Tensor(v) for v in (x, w1, w2, w3))).data
        np.testing.assert_allclose(out, ref, atol=1e-12)

    @pytest.mark.parametrize("attention", ["evo", "full"])
    def test_identity_when_both_sublayers_are_silenced(self, attention):
        inst, block = make_block(1)
        block.attn.w_o.data[:] = 0.0
        block.ffn_w3.data[:] = 0.0
        np.testing.assert_array_equal(run(inst, block, attention).data, inst.e_s.data)

    def test_residual_structure(self):
        # with a silent FFN the block is x + attention(norm(x))
        inst, block = make_block(2)
        block.ffn_w3.data[:] = 0.0
        from sparsectr.attention import evo_attention

        h = T.rmsnorm(inst.e_s, block.norm1)
        att = evo_attention(h, inst.e_b(h), inst.e_user, inst.layout, block.attn,
                            inst.layout.biases(inst.slopes))
        np.testing.assert_allclose(run(inst, block).data, inst.e_s.data + att.data, atol=1e-13)

    def test_unknown_attention_kind(self):
        inst, block = make_block(3)
        with pytest.raises(ValueError):
            run(inst, block, "dense")

    @pytest.mark.parametrize("attention", ["evo", "full"])
    def test_gradients(self, attention):
        inst, block = make_block(4)
        proj = np.random.default_rng(5).normal(size=inst.e_s.shape)
        targets = [inst.e_s, inst.e_user] + list(block.named("b").values())

        def value():
            return float(np.sum(run(inst, block, attention).data * proj))

        T.zero_grads(targets)
        T.backward(T.tsum(T.mul(run(inst, block, attention), proj)))
        for t in targets:
            fd = finite_difference(value, t.data)
            an = np.zeros_like(t.data) if t.grad is None else t.grad
            assert np.abs(an - fd).max() / max(np.abs(fd).max(), 1e-6) < 1e-5
