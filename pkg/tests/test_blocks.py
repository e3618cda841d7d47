import math

import numpy as np
import pytest

from diffpali import tensor as T
from diffpali.attention import Variant, causal_mask, multi_head
from diffpali.blocks import (FeedForwardParams, FfnKind, LayerParams, feed_forward, layer_forward, plain_mlp,
                             stack_forward, swiglu, swiglu_width)
from diffpali.tensor import ContractError, Tensor, grad_check, make_rng


def loop_swiglu(x, wg, w1, w2):
    n, d = x.shape
    d_ff = w1.shape[1]
    out = np.zeros((n, w2.shape[1]))
    for i in range(n):
        hidden = []
        for j in range(d_ff):
            g = sum(float(x[i, t]) * float(wg[t, j]) for t in range(d))
            u = sum(float(x[i, t]) * float(w1[t, j]) for t in range(d))
            hidden.append(g / (1 + math.exp(-g)) * u)
        for c in range(w2.shape[1]):
            out[i, c] = sum(hidden[j] * float(w2[j, c]) for j in range(d_ff))
    return out


def zero_layer(d_model=16, d_head=8, ffn=FfnKind.SWIGLU):
    p = LayerParams.init(make_rng(0), d_model, d_head, Variant.DIFF_FINETUNE, ffn, 1)
    for t in [p.attn.w_q, p.attn.w_k, p.attn.w_v, p.attn.w_o, p.attn.head_norm, p.norm1, p.norm2,
              *p.ffn.tensors().values()]:
        t.data = np.zeros_like(t.data)
    return p


class TestSwiglu:
    def test_zero_input(self):
        p = FeedForwardParams.init(make_rng(0), 8, FfnKind.SWIGLU)
        assert np.all(swiglu(Tensor(np.zeros((3, 8))), p).data == 0)

    def test_zero_gate(self):
        p = FeedForwardParams.init(make_rng(1), 8, FfnKind.SWIGLU)
        p.w_g.data = np.zeros_like(p.w_g.data)
        x = Tensor(make_rng(2).standard_normal((3, 8)))
        assert np.all(swiglu(x, p).data == 0)

    @pytest.mark.parametrize("seed", range(3))
    def test_scalar_loop_2x4(self, seed):
        p = FeedForwardParams.init(make_rng(seed), 4, FfnKind.SWIGLU)
        x = Tensor(make_rng(seed + 10).standard_normal((2, 4)))
        ref = loop_swiglu(x.data, p.w_g.data, p.w_1.data, p.w_2.data)
        np.testing.assert_allclose(swiglu(x, p).data, ref, rtol=1e-5, atol=1e-6)

    @pytest.mark.parametrize("d,expected", [(64, 176), (16, 48), (4, 16), (24, 64), (96, 256)])
    def test_width_rule(self, d, expected):
        assert swiglu_width(d) == expected
        assert swiglu_width(d) % 8 == 0 and swiglu_width(d) >= 8 * d / 3 - 0.5

    def test_kind_mismatch(self):
        p = FeedForwardParams.init(make_rng(0), 8, FfnKind.MLP)
        with pytest.raises(ContractError):
            swiglu(Tensor(np.zeros((1, 8))), p)


class TestPlainMlp:
    def test_width_and_no_gate(self):
        p = FeedForwardParams.init(make_rng(0), 8, FfnKind.MLP)
        assert p.w_1.shape == (8, 32) and p.w_g is None

    def test_matches_gelu_formula(self):
        p = FeedForwardParams.init(make_rng(3), 4, FfnKind.MLP)
        x = make_rng(4).standard_normal((2, 4)).astype(np.float32)
        h = x.astype(np.float64) @ p.w_1.data
        gelu = 0.5 * h * (1 + np.tanh(math.sqrt(2 / math.pi) * (h + 0.044715 * h ** 3)))
        np.testing.assert_allclose(plain_mlp(Tensor(x), p).data, gelu @ p.w_2.data, rtol=1e-5, atol=1e-6)

    @pytest.mark.parametrize("kind", list(FfnKind))
    def test_interchangeable_shapes(self, kind):
        p = FeedForwardParams.init(make_rng(0), 16, kind)
        assert feed_forward(Tensor(np.ones((5, 16))), p).shape == (5, 16)


class TestLayer:
    @pytest.mark.parametrize("ffn", list(FfnKind))
    def test_zero_weights_is_identity(self, ffn):
        x = Tensor(make_rng(5).standard_normal((4, 16)))
        np.testing.assert_array_equal(layer_forward(x, zero_layer(ffn=ffn), causal_mask(4)).data, x.data)

    def test_branches_sum_to_residual_delta(self):
        rng = make_rng(6)
        p = LayerParams.init(rng, 16, 8, Variant.DIFF_ORIGINAL, FfnKind.SWIGLU, 1)
        for t in [p.attn.w_q, p.attn.w_k, p.attn.w_v, p.attn.w_o, *p.ffn.tensors().values()]:
            t.data = (t.data * 0.01 + np.eye(*t.shape) * 0.05).astype(np.float32)
        x = Tensor(rng.standard_normal((3, 16)))
        mask = causal_mask(3)
        attn_branch = multi_head(T.rms_norm(x, p.norm1), p.attn, p.lam, mask).data
        y = x.data + attn_branch
        ffn_branch = feed_forward(T.rms_norm(Tensor(y), p.norm2), p.ffn).data
        delta = layer_forward(x, p, mask).data - x.data
        np.testing.assert_allclose(delta, attn_branch + ffn_branch, atol=1e-6)
        assert abs(np.linalg.norm(delta) - np.linalg.norm(attn_branch + ffn_branch)) < 1e-6

    def test_stack_of_two_is_composition(self):
        rng = make_rng(7)
        layers = [LayerParams.init(rng, 16, 8, Variant.DIFF_FINETUNE, FfnKind.SWIGLU, i) for i in (1, 2)]
        x = Tensor(rng.standard_normal((4, 16)))
        mask = causal_mask(4)
        composed = layer_forward(layer_forward(x, layers[0], mask), layers[1], mask)
        np.testing.assert_array_equal(stack_forward(x, layers, mask).data, composed.data)

    def test_stack_checks_layer_index(self):
        rng = make_rng(8)
        layers = [LayerParams.init(rng, 16, 8, Variant.VANILLA, FfnKind.MLP, 2)]
        with pytest.raises(ContractError):
            stack_forward(Tensor(np.zeros((2, 16))), layers)

    @pytest.mark.parametrize("n_layers", [1, 2, 3])
    def test_output_shape(self, n_layers):
        rng = make_rng(9)
        layers = [LayerParams.init(rng, 16, 8, Variant.VANILLA, FfnKind.MLP, i + 1) for i in range(n_layers)]
        assert stack_forward(Tensor(np.ones((6, 16))), layers, causal_mask(6)).shape == (6, 16)

    @pytest.mark.parametrize("variant", [Variant.DIFF_ORIGINAL, Variant.DIFF_FINETUNE])
    def test_full_layer_grad_check(self, variant):
        rng = make_rng(10)
        p = LayerParams.init(rng, 16, 8, variant, FfnKind.SWIGLU, 2)
        x = Tensor(rng.standard_normal((4, 16)))
        target = Tensor(rng.standard_normal((4, 16)))

        def f():
            d = layer_forward(x, p, causal_mask(4)) - target
            return (d * d).mean()

        params = [p.attn.w_q, p.attn.w_k, p.attn.w_v, p.attn.w_o, p.attn.head_norm, p.norm1, p.norm2,
                  *p.lam.vectors().values(), *p.ffn.tensors().values()]
        assert grad_check(f, params, h=1e-4, max_coords=12, rng=make_rng(0)) < 1e-3
