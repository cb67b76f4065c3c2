"""Adam updates, seeded streams, and initialization statistics."""

import numpy as np
import pytest

from streamact.errors import NumericError
from streamact.optim import Adam, AdamState, adam_step
from streamact.rng import SeededRng, xavier_uniform_init
from streamact.tensor import Tensor


class TestAdamStep:
    def test_zero_gradient_zero_decay_is_identity(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        before = p.data.copy()
        adam_step(p, np.zeros(3), AdamState.for_param(p), lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(p.data, before)

    def test_single_step_hand_value(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        adam_step(p, np.array([1.0]), AdamState.for_param(p), lr=0.1, weight_decay=0.0)
        # m_hat = v_hat = 1 after correction: delta = -0.1 / (1 + 1e-8)
        expected = -0.1 / (1.0 + 1e-8)
        np.testing.assert_allclose(p.data, [expected], rtol=0, atol=1e-15)
        np.testing.assert_allclose(p.data, [-0.1], atol=1e-8)

    def test_defaults_match_training_setup(self):
        opt = Adam({"w": Tensor(np.zeros(2), requires_grad=True)})
        assert opt.lr == 1e-4
        assert opt.weight_decay == 5e-4

    def test_nan_gradient_aborts_naming_parameter(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(NumericError, match="enc.w"):
            adam_step(p, np.array([np.nan, 0.0]), AdamState.for_param(p),
                      lr=0.1, name="enc.w")

    def test_weight_decay_is_coupled(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        state = AdamState.for_param(p)
        adam_step(p, np.array([0.0]), state, lr=0.1, weight_decay=0.5)
        # effective gradient 0 + 0.5*2 = 1 -> same as the unit-gradient case
        np.testing.assert_allclose(p.data, [2.0 - 0.1 / (1.0 + 1e-8)], atol=1e-15)

    def test_step_counter_increments_by_one(self):
        p = Tensor(np.zeros(1), requires_grad=True)
        state = AdamState.for_param(p)
        for expected in (1, 2, 3):
            adam_step(p, np.ones(1), state, lr=0.01)
            assert state.t == expected


class TestAdamOptimizer:
    def test_params_without_grad_stay_bit_identical(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        b = Tensor(np.array([3.0, 4.0]), requires_grad=True)
        opt = Adam({"a": a, "b": b}, lr=0.1, weight_decay=0.1)
        a.grad = np.ones(2)
        before_b = b.data.copy()
        opt.step()
        assert not np.array_equal(a.data, np.array([1.0, 2.0]))
        np.testing.assert_array_equal(b.data, before_b)
        assert opt.state["b"].t == 0

    def test_zero_grad_clears(self):
        a = Tensor(np.zeros(2), requires_grad=True)
        opt = Adam({"a": a})
        a.grad = np.ones(2)
        opt.zero_grad()
        assert a.grad is None


class TestSeededRng:
    def test_same_seed_same_draws(self):
        a = SeededRng(42).uniform(-1, 1, (100,))
        b = SeededRng(42).uniform(-1, 1, (100,))
        np.testing.assert_array_equal(a, b)

    def test_split_streams_are_stable_and_distinct(self):
        root = SeededRng(7)
        x = root.split("alpha").normal((50,))
        y = SeededRng(7).split("alpha").normal((50,))
        z = root.split("beta").normal((50,))
        np.testing.assert_array_equal(x, y)
        assert not np.array_equal(x, z)

    def test_split_is_order_independent(self):
        r1 = SeededRng(3)
        first = r1.split("a").uniform(0, 1, (10,))
        r2 = SeededRng(3)
        _ = r2.split("b").uniform(0, 1, (10,))
        again = r2.split("a").uniform(0, 1, (10,))
        np.testing.assert_array_equal(first, again)

    def test_shuffle_order_is_permutation(self):
        order = SeededRng(1).shuffle_order(1000)
        assert sorted(order.tolist()) == list(range(1000))
        np.testing.assert_array_equal(order, SeededRng(1).shuffle_order(1000))


class TestXavierInit:
    def test_bound(self):
        t = xavier_uniform_init((4, 4), SeededRng(0))
        bound = np.sqrt(6.0 / 8.0)
        assert np.all(np.abs(t.data) <= bound)
        assert t.requires_grad

    def test_determinism(self):
        a = xavier_uniform_init((16, 16), SeededRng(5).split("w"))
        b = xavier_uniform_init((16, 16), SeededRng(5).split("w"))
        np.testing.assert_array_equal(a.data, b.data)

    def test_empirical_mean_is_centered(self):
        n = 1_000_000
        t = xavier_uniform_init((n,), SeededRng(11))
        bound = np.sqrt(6.0 / (2 * n))
        sigma = 2 * bound / np.sqrt(12.0)  # std of U(-bound, bound)
        assert abs(t.data.mean()) < 3 * sigma / np.sqrt(n)

    def test_empirical_mean_2d(self):
        t = xavier_uniform_init((1000, 1000), SeededRng(13))
        bound = np.sqrt(6.0 / 2000)
        sigma = 2 * bound / np.sqrt(12.0)
        assert abs(t.data.mean()) < 3 * sigma / 1000.0
