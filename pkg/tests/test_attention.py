"""Attention primitives and transformer layers against naive oracles."""

import math

import numpy as np
import pytest

import streamact.tensor as T
from streamact.attention import (DecoderLayerParams, EncoderLayerParams, MultiHeadParams,
                                 decoder_layer_forward, encoder_layer_forward,
                                 multi_head_cross_attention, multi_head_self_attention,
                                 scaled_dot_attention)
from streamact.errors import DimensionError
from streamact.rng import SeededRng
from streamact.tensor import Tensor, backward

from gradcheck import check_tensor_grad
from naive_model import _attention as naive_attention


def tensors(rng, *shapes):
    return [Tensor(rng.standard_normal(s)) for s in shapes]


class TestScaledDotAttention:
    def test_single_key_returns_value(self):
        rng = np.random.default_rng(0)
        q = Tensor(rng.standard_normal((3, 4)))
        k = Tensor(rng.standard_normal((1, 4)))
        v = Tensor(rng.standard_normal((1, 5)))
        out, weights = scaled_dot_attention(q, k, v, scale=2.0)
        np.testing.assert_allclose(out.data, np.broadcast_to(v.data, (3, 5)), atol=1e-15)
        np.testing.assert_allclose(weights.data, 1.0, atol=1e-15)

    def test_zero_query_averages_values(self):
        q = Tensor(np.zeros((1, 3)))
        k = Tensor(np.random.default_rng(1).standard_normal((2, 3)))
        v = Tensor(np.array([[2.0, 0.0], [4.0, 0.0]]))
        out, _ = scaled_dot_attention(q, k, v, scale=1.0)
        np.testing.assert_allclose(out.data, [[3.0, 0.0]], atol=1e-12)

    def test_two_key_softmax_value(self):
        out, weights = scaled_dot_attention(Tensor([[1.0]]), Tensor([[1.0], [0.0]]),
                                            Tensor([[1.0], [0.0]]), scale=1.0)
        expected = math.exp(1.0) / (math.exp(1.0) + 1.0)
        np.testing.assert_allclose(out.data, [[expected]], atol=1e-12)
        np.testing.assert_allclose(out.data, [[0.73105858]], atol=1e-8)
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_empty_keys_rejected(self):
        with pytest.raises(DimensionError):
            scaled_dot_attention(Tensor(np.zeros((1, 2))), Tensor(np.zeros((0, 2))),
                                 Tensor(np.zeros((0, 2))), scale=1.0)


def make_mha(rng_name, q_width, kv_width, out_width, heads):
    return MultiHeadParams.init(SeededRng(0).split(rng_name), q_width, kv_width,
                                out_width, heads)


def naive_mha(x_q, x_kv, p: MultiHeadParams, prefix="m"):
    params = {f"{prefix}.q{i}": w.data.tolist() for i, w in enumerate(p.w_q)}
    params |= {f"{prefix}.k{i}": w.data.tolist() for i, w in enumerate(p.w_k)}
    params |= {f"{prefix}.v{i}": w.data.tolist() for i, w in enumerate(p.w_v)}
    params[f"{prefix}.out"] = p.w_out.data.tolist()
    return np.array(naive_attention(x_q.tolist(), x_kv.tolist(), params, prefix, p.n_head))


class TestMultiHeadSelfAttention:
    def test_single_head_equals_plain_attention(self):
        rng = np.random.default_rng(2)
        p = make_mha("single", 4, 4, 4, 1)
        x = Tensor(rng.standard_normal((3, 4)))
        got, _ = multi_head_self_attention(x, p)
        q = T.matmul(x, p.w_q[0])
        k = T.matmul(x, p.w_k[0])
        v = T.matmul(x, p.w_v[0])
        plain, _ = scaled_dot_attention(q, k, v, scale=math.sqrt(4))
        expected = T.matmul(plain, p.w_out)
        np.testing.assert_allclose(got.data, expected.data, atol=1e-14)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        p = make_mha("perm", 6, 6, 6, 2)
        x = rng.standard_normal((5, 6))
        perm = rng.permutation(5)
        direct, _ = multi_head_self_attention(Tensor(x[perm]), p)
        base, _ = multi_head_self_attention(Tensor(x), p)
        np.testing.assert_allclose(direct.data, base.data[perm], atol=1e-10)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(4)
        p = make_mha("oracle", 4, 4, 4, 2)
        x = rng.standard_normal((3, 4))
        got, _ = multi_head_self_attention(Tensor(x), p)
        np.testing.assert_allclose(got.data, naive_mha(x, x, p), atol=1e-12, rtol=0)

    def test_weight_rows_are_distributions(self):
        rng = np.random.default_rng(5)
        p = make_mha("dist", 8, 8, 8, 4)
        _, weights = multi_head_self_attention(Tensor(rng.standard_normal((6, 8)) * 5), p)
        assert weights.shape == (4, 6, 6)
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-9)
        assert np.all(weights.data >= 0) and np.all(weights.data <= 1)

    def test_width_mismatch(self):
        p = make_mha("bad", 4, 4, 4, 2)
        with pytest.raises(DimensionError):
            multi_head_self_attention(Tensor(np.zeros((3, 5))), p)


class TestMultiHeadCrossAttention:
    def test_single_memory_token_gets_full_weight(self):
        rng = np.random.default_rng(6)
        p = make_mha("cross1", 4, 6, 4, 2)
        xq = Tensor(rng.standard_normal((3, 4)))
        memory = Tensor(rng.standard_normal((1, 6)))
        _, weights = multi_head_cross_attention(xq, memory, p)
        np.testing.assert_allclose(weights.data, 1.0, atol=1e-15)

    def test_memory_permutation_invariance(self):
        rng = np.random.default_rng(7)
        p = make_mha("cross2", 4, 6, 4, 2)
        xq = Tensor(rng.standard_normal((2, 4)))
        mem = rng.standard_normal((5, 6))
        base, _ = multi_head_cross_attention(xq, Tensor(mem), p)
        perm, _ = multi_head_cross_attention(xq, Tensor(mem[rng.permutation(5)]), p)
        np.testing.assert_allclose(base.data, perm.data, atol=1e-10)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(8)
        p = make_mha("cross3", 4, 6, 4, 2)
        xq = rng.standard_normal((2, 4))
        mem = rng.standard_normal((3, 6))
        got, _ = multi_head_cross_attention(Tensor(xq), Tensor(mem), p)
        np.testing.assert_allclose(got.data, naive_mha(xq, mem, p), atol=1e-12, rtol=0)

    def test_empty_memory_rejected(self):
        p = make_mha("cross4", 4, 6, 4, 2)
        with pytest.raises(DimensionError):
            multi_head_cross_attention(Tensor(np.zeros((2, 4))),
                                       Tensor(np.zeros((0, 6))), p)


def zero_residual_branches(layer):
    """Zero every weight that feeds a residual branch, making the layer an identity."""
    mhas = [getattr(layer, name) for name in ("attn", "self_attn", "cross_attn")
            if hasattr(layer, name)]
    for mha in mhas:
        mha.w_out.data = np.zeros_like(mha.w_out.data)
    layer.ffn.w2.data = np.zeros_like(layer.ffn.w2.data)
    layer.ffn.b2.data = np.zeros_like(layer.ffn.b2.data)


class TestEncoderLayer:
    def test_zeroed_branches_give_identity(self):
        rng = np.random.default_rng(9)
        layer = EncoderLayerParams.init(SeededRng(1).split("enc"), 6, 2, 12)
        zero_residual_branches(layer)
        x = rng.standard_normal((4, 6))
        out = encoder_layer_forward(Tensor(x), layer)
        np.testing.assert_array_equal(out.data, x)

    def test_shape_preserved_for_any_length(self):
        layer = EncoderLayerParams.init(SeededRng(2).split("enc"), 8, 4, 16)
        for length in (1, 2, 7):
            x = Tensor(np.random.default_rng(length).standard_normal((length, 8)))
            assert encoder_layer_forward(x, layer).shape == (length, 8)

    def test_no_causal_mask(self):
        rng = np.random.default_rng(10)
        layer = EncoderLayerParams.init(SeededRng(3).split("enc"), 6, 2, 12)
        x = rng.standard_normal((5, 6))
        base = encoder_layer_forward(Tensor(x), layer).data
        bumped = x.copy()
        bumped[4, 2] += 1.0  # perturb one component of the last position
        changed = encoder_layer_forward(Tensor(bumped), layer).data
        assert np.abs(changed[0] - base[0]).max() > 1e-8

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        layer = EncoderLayerParams.init(SeededRng(4).split("enc"), 4, 2, 8)
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 4)))

        def build():
            return T.tsum(encoder_layer_forward(x, layer) * w)

        backward(build())
        leaves = [x] + [p for _, p in layer.named("enc")]
        problems = []
        for t in leaves:
            problems += check_tensor_grad(lambda: float(build().data), t)
        assert not problems, problems[:5]


class TestDecoderLayer:
    def test_zeroed_branches_give_identity(self):
        rng = np.random.default_rng(12)
        layer = DecoderLayerParams.init(SeededRng(5).split("dec"), 6, 8, 2, 12)
        zero_residual_branches(layer)
        queries = rng.standard_normal((3, 6))
        memory = Tensor(rng.standard_normal((4, 8)))
        out = decoder_layer_forward(Tensor(queries), memory, layer)
        np.testing.assert_array_equal(out.data, queries)

    def test_single_query_self_attention_degenerates(self):
        rng = np.random.default_rng(13)
        layer = DecoderLayerParams.init(SeededRng(6).split("dec"), 4, 6, 2, 8)
        self_maps: list = []
        decoder_layer_forward(Tensor(rng.standard_normal((1, 4))),
                              Tensor(rng.standard_normal((3, 6))), layer,
                              self_maps_out=self_maps)
        np.testing.assert_allclose(self_maps[0], 1.0, atol=1e-15)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(14)
        layer = DecoderLayerParams.init(SeededRng(7).split("dec"), 4, 6, 2, 8)
        queries = rng.standard_normal((2, 4))
        memory = rng.standard_normal((3, 6))
        got = decoder_layer_forward(Tensor(queries), Tensor(memory), layer)

        from naive_model import _decoder_layer
        params = {f"d.{name.split('.', 1)[1]}": t.data.tolist()
                  for name, t in layer.named("d")}
        expected = np.array(_decoder_layer(queries.tolist(), memory.tolist(),
                                           params, "d", 2, 1e-5))
        np.testing.assert_allclose(got.data, expected, atol=1e-12, rtol=0)
