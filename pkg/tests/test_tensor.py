"""Numerics core: op semantics, stability guards, and gradient correctness."""

import math

import numpy as np
import pytest

import streamact.tensor as T
from streamact.errors import ContractError, DimensionError, LabelError
from streamact.tensor import ComputationRecord, Tensor, backward, no_grad

from gradcheck import check_tensor_grad


def leaf(shape, rng, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(Tensor(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_hand_case(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_zero_annihilates(self):
        z = Tensor(np.zeros((2, 3)))
        out = T.matmul(z, Tensor(np.arange(12.0).reshape(3, 4)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_backward_rules(self):
        rng = np.random.default_rng(0)
        a = leaf((3, 4), rng)
        b = leaf((4, 2), rng)
        g = rng.standard_normal((3, 2))
        out = T.matmul(a, b)
        backward(T.tsum(out * Tensor(g)))
        np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-12)


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((5, 7))
        for c in (1.0, -3.5, 1e4):
            a = T.softmax(Tensor(x), axis=-1).data
            b = T.softmax(Tensor(x + c), axis=-1).data
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_two_logit_value(self):
        expected = math.exp(1.0) / (math.exp(1.0) + 1.0)
        out = T.softmax(Tensor([1.0, 0.0]))
        np.testing.assert_allclose(out.data, [expected, 1 - expected], atol=1e-12)
        np.testing.assert_allclose(out.data, [0.73105858, 0.26894142], atol=1e-8)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 6, 9)) * 40
        out = T.softmax(Tensor(x), axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(out.data >= 0)

    def test_extreme_finite_inputs_stay_finite(self):
        x = Tensor([[1e300, -1e300, 0.0], [700.0, -700.0, 699.0]])
        out = T.softmax(x, axis=-1)
        assert np.all(np.isfinite(out.data))

    def test_empty_axis_rejected(self):
        with pytest.raises(DimensionError):
            T.softmax(Tensor(np.zeros((3, 0))), axis=-1)


class TestLayerNorm:
    def test_constant_vector_goes_to_zero(self):
        out = T.layer_norm(Tensor([4.0, 4.0, 4.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-10)

    def test_two_point_case(self):
        out = T.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                           eps=1e-12)
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-6)

    def test_zero_gamma_collapses_to_beta(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 5))
        beta = rng.standard_normal(5)
        out = T.layer_norm(Tensor(x), Tensor(np.zeros(5)), Tensor(beta))
        np.testing.assert_allclose(out.data, np.broadcast_to(beta, (4, 5)), atol=1e-12)

    def test_normalization_statistics(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((6, 32)) * 2.0 + 1.0
        out = T.layer_norm(Tensor(x), Tensor(np.ones(32)), Tensor(np.zeros(32))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_zero_width_rejected(self):
        with pytest.raises(DimensionError):
            T.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


class TestGelu:
    def test_zero(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    def test_one_matches_gaussian_cdf(self):
        expected = 1.0 * 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
        out = float(T.gelu(Tensor([1.0])).data[0])
        assert abs(out - expected) < 1e-12
        assert abs(out - 0.84134475) < 1e-8

    def test_saturating_tail(self):
        assert abs(float(T.gelu(Tensor([-10.0])).data[0])) < 1e-8


class TestCrossEntropy:
    def test_uniform_logits(self):
        out = T.cross_entropy(Tensor([0.5, 0.5, 0.5]), 2)
        np.testing.assert_allclose(out.data, math.log(3.0), atol=1e-12)

    def test_confident_correct_limit(self):
        logits = np.zeros(4)
        logits[1] = 1e6
        assert float(T.cross_entropy(Tensor(logits), 1).data) < 1e-9

    def test_permuting_equal_nontarget_logits(self):
        a = T.cross_entropy(Tensor([2.0, 0.3, 0.3, 0.3]), 0).data
        b = T.cross_entropy(Tensor([2.0, 0.3, 0.3, 0.3][::-1]), 3).data
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_target_out_of_range(self):
        with pytest.raises(LabelError):
            T.cross_entropy(Tensor([0.0, 0.0]), 2)
        with pytest.raises(LabelError):
            T.cross_entropy(Tensor([[0.0, 0.0]]), [-1])

    def test_batch_mean_matches_rows(self):
        rng = np.random.default_rng(5)
        logits = rng.standard_normal((6, 4))
        targets = rng.integers(0, 4, size=6)
        batch = float(T.cross_entropy(Tensor(logits), targets).data)
        rows = [float(T.cross_entropy(Tensor(logits[i]), int(targets[i])).data)
                for i in range(6)]
        np.testing.assert_allclose(batch, np.mean(rows), atol=1e-12)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_rule(self):
        rng = np.random.default_rng(6)
        x = leaf((3, 4), rng)
        backward(T.tsum(x * x))
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-12)

    def test_double_consumption_accumulates(self):
        rng = np.random.default_rng(7)
        x = leaf((5,), rng)
        loss = T.tsum(x * x) + T.tsum(x * 3.0)
        backward(loss)
        np.testing.assert_allclose(x.grad, 2 * x.data + 3.0, atol=1e-12)

    def test_non_scalar_root_rejected(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            backward(x + 1.0)

    def test_record_is_topologically_ordered_and_unique(self):
        rng = np.random.default_rng(8)
        x = leaf((3, 3), rng)
        y = T.matmul(x, x)
        loss = T.tsum(T.softmax(y) * y)
        record = ComputationRecord.from_root(loss)
        ids = [id(op) for op in record.ops]
        assert len(ids) == len(set(ids))
        seen = set()
        for op in record.ops:
            for parent in op._parents:
                if parent._parents:  # intermediate inputs must already be listed
                    assert id(parent) in seen
            seen.add(id(op))

    def test_no_grad_blocks_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = T.tsum(x * x)
        assert not y.requires_grad
        with pytest.raises(ContractError):
            backward(y)


class TestShapeOps:
    def test_concat_roundtrip(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.zeros((2, 2)))
        out = T.concat([a, b], axis=1)
        assert out.shape == (2, 5)

    def test_select_and_narrow(self):
        x = Tensor(np.arange(24.0).reshape(2, 3, 4))
        np.testing.assert_array_equal(T.select(x, 1, axis=1).data, x.data[:, 1, :])
        np.testing.assert_array_equal(T.narrow(x, 1, 0, 2).data, x.data[:, :2, :])

    def test_max_routes_to_first_argmax(self):
        x = Tensor(np.array([[1.0, 3.0, 3.0]]), requires_grad=True)
        backward(T.tsum(T.tmax(x, axis=1)))
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_broadcast_to_sums_gradient(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        backward(T.tsum(T.broadcast_to(T.reshape(x, (1, 2)), (4, 2))))
        np.testing.assert_array_equal(x.grad, [4.0, 4.0])


def _fd_check_all(build_loss, *leaves):
    """Backward once, then FD-check every entry of every leaf."""
    loss = build_loss()
    backward(loss)
    problems = []
    for t in leaves:
        problems += check_tensor_grad(lambda: float(build_loss().data), t)
    assert not problems, problems[:5]


class TestFiniteDifferences:
    """Every differentiable op against central differences on random shapes."""

    def setup_method(self):
        self.rng = np.random.default_rng(99)

    def test_matmul(self):
        a, b = leaf((2, 3), self.rng), leaf((3, 4), self.rng)
        w = Tensor(self.rng.standard_normal((2, 4)))
        _fd_check_all(lambda: T.tsum(T.matmul(a, b) * w), a, b)

    def test_batched_matmul(self):
        a, b = leaf((2, 3, 4), self.rng), leaf((4, 5), self.rng)
        w = Tensor(self.rng.standard_normal((2, 3, 5)))
        _fd_check_all(lambda: T.tsum(T.matmul(a, b) * w), a, b)

    def test_softmax(self):
        x = leaf((3, 5), self.rng)
        w = Tensor(self.rng.standard_normal((3, 5)))
        _fd_check_all(lambda: T.tsum(T.softmax(x, axis=-1) * w), x)

    def test_layer_norm(self):
        x = leaf((4, 6), self.rng)
        gamma = leaf((6,), self.rng)
        beta = leaf((6,), self.rng)
        w = Tensor(self.rng.standard_normal((4, 6)))
        _fd_check_all(lambda: T.tsum(T.layer_norm(x, gamma, beta) * w), x, gamma, beta)

    def test_gelu(self):
        x = leaf((4, 4), self.rng)
        w = Tensor(self.rng.standard_normal((4, 4)))
        _fd_check_all(lambda: T.tsum(T.gelu(x) * w), x)

    def test_cross_entropy(self):
        x = leaf((5, 4), self.rng)
        targets = self.rng.integers(0, 4, size=5)
        _fd_check_all(lambda: T.cross_entropy(x, targets), x)

    def test_elementwise_and_broadcast(self):
        a = leaf((3, 4), self.rng)
        b = leaf((4,), self.rng)
        _fd_check_all(lambda: T.tsum((a + b) * (a - b) * 0.5), a, b)

    def test_shape_ops(self):
        x = leaf((2, 3, 4), self.rng)
        w = Tensor(self.rng.standard_normal((4, 6)))

        def build():
            y = T.transpose(x, (1, 0, 2))
            y = T.reshape(y, (6, 4))
            y = T.concat([y, T.narrow(y, 0, 0, 2)], axis=0)
            return T.tsum(T.matmul(y, w)) + T.tsum(T.select(x, 1, axis=2))

        _fd_check_all(build, x)

    def test_reductions(self):
        x = leaf((3, 5), self.rng)
        _fd_check_all(lambda: T.tsum(T.tmean(x, axis=1)) + T.tsum(T.tmax(x, axis=0)), x)
