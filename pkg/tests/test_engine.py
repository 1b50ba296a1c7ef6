import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ucddp import engine as E
from ucddp.engine import AdamState, CosineSchedule, Tensor, adam_step, cosine_lr
from ucddp.errors import ConfigurationError, UsageError, ValidationError

from _oracles import conv_loops, finite_difference_check, matmul_loops, relative_error


class TestLinear:
    def test_identity_weights(self):
        out = E.linear(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_hand_sum(self):
        out = E.linear(Tensor([[1.0, 1.0]]), Tensor([[2.0], [3.0]]), Tensor([1.0]))
        assert out.data.tolist() == [[6.0]]

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
        out = E.linear(Tensor(x.astype(np.float32)), Tensor(w.astype(np.float32)), Tensor(b.astype(np.float32)))
        ref = matmul_loops(x.astype(np.float32), w.astype(np.float32), b.astype(np.float32))
        assert np.abs(out.data - ref).max() < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            E.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.ones(2)))


class TestConv2d:
    def test_delta_kernel_is_identity(self):
        x = np.random.default_rng(0).random((2, 1, 5, 6)).astype(np.float32)
        k = np.zeros((1, 1, 3, 3), np.float32)
        k[0, 0, 1, 1] = 1
        out = E.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1, np.float32)))
        np.testing.assert_array_equal(out.data, x)

    def test_ones_kernel_on_constant_field(self):
        c = 0.25
        x = np.full((1, 1, 6, 6), c, np.float32)
        out = E.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3), np.float32)), Tensor(np.zeros(1, np.float32)))
        np.testing.assert_allclose(out.data[0, 0, 1:-1, 1:-1], 9 * c)
        assert out.data[0, 0, 0, 0] == pytest.approx(4 * c)  # corner sees a 2x2 window

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 1, 4, 4)).astype(np.float32)
        k = rng.normal(size=(2, 1, 3, 3)).astype(np.float32)
        b = rng.normal(size=2).astype(np.float32)
        out = E.conv2d(Tensor(x), Tensor(k), Tensor(b))
        assert np.abs(out.data - conv_loops(x, k, b)).max() < 1e-6

    def test_multichannel_matches_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 3, 4, 6)).astype(np.float32)
        k = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        out = E.conv2d(Tensor(x), Tensor(k), Tensor(b))
        assert np.abs(out.data - conv_loops(x, k, b)).max() < 1e-5

    def test_channel_mismatch(self):
        with pytest.raises(ConfigurationError):
            E.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.ones(1)))


class TestActivations:
    def test_relu(self):
        assert E.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_log_softmax_symmetry(self):
        out = E.log_softmax(Tensor([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[-math.log(2), -math.log(2)]], rtol=1e-6)

    def test_maxpool(self):
        out = E.maxpool2(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        assert out.data.tolist() == [[[[4.0]]]]

    def test_maxpool_odd_extent(self):
        with pytest.raises(ConfigurationError):
            E.maxpool2(Tensor(np.ones((1, 1, 3, 4))))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 10), st.floats(0.1, 30.0), st.integers(0, 2**31 - 1))
    def test_log_softmax_rows_normalize(self, b, k, scale, seed):
        x = np.random.default_rng(seed).normal(size=(b, k)) * scale
        out = E.log_softmax(Tensor(x.astype(np.float32)))
        np.testing.assert_allclose(np.exp(out.data.astype(np.float64)).sum(axis=1), 1.0, atol=1e-6)


class TestKL:
    def test_identical_distributions(self):
        logp = E.log_softmax(Tensor(np.random.default_rng(0).normal(size=(4, 3)).astype(np.float32)))
        loss = E.kl_div_batchmean(logp, np.exp(logp.data.astype(np.float64)) / np.exp(logp.data.astype(np.float64)).sum(1, keepdims=True))
        assert abs(loss.item()) < 1e-7

    def test_hand_computed_fixture(self):
        # 0.5·ln(0.5/0.25) + 0.5·ln(0.5/0.75)
        expected = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
        loss = E.kl_div_batchmean(Tensor(np.log([[0.25, 0.75]])), [[0.5, 0.5]])
        assert loss.item() == pytest.approx(0.143841, abs=1e-5)
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_one_hot_target_is_neg_log_p(self):
        p = 0.3
        loss = E.kl_div_batchmean(Tensor(np.log([[p, 0.5, 0.2]])), [[1.0, 0.0, 0.0]])
        assert loss.item() == pytest.approx(-math.log(p), rel=1e-6)

    def test_unnormalized_target_rejected(self):
        with pytest.raises(ValidationError):
            E.kl_div_batchmean(Tensor(np.log([[0.5, 0.5]])), [[0.6, 0.6]])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5), st.integers(2, 6), st.integers(0, 2**31 - 1))
    def test_non_negative(self, b, k, seed):
        rng = np.random.default_rng(seed)
        logp = E.log_softmax(Tensor(rng.normal(size=(b, k))))
        t = rng.random((b, k))
        t /= t.sum(axis=1, keepdims=True)
        assert E.kl_div_batchmean(logp, t).item() >= -1e-12


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        E.sum_all(E.square(x)).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_kl_after_log_softmax_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        target = rng.random((4, 3))
        target /= target.sum(axis=1, keepdims=True)

        def loss(p):
            return E.kl_div_batchmean(E.log_softmax(p["z"]), target)

        for _, _, a, n in finite_difference_check(loss, {"z": rng.normal(size=(4, 3))}, 12, seed=1):
            assert relative_error(a, n) < 1e-3

    def test_unused_parameter_gets_zero(self):
        used = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor([3.0], requires_grad=True)
        E.sum_all(used * unused * 0.0 + used).backward()
        np.testing.assert_array_equal(unused.grad, [0.0])

    def test_non_scalar_rejected(self):
        with pytest.raises(UsageError):
            Tensor([1.0, 2.0], requires_grad=True).backward()

    def test_shared_node_visited_once(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * x  # used twice below
        E.sum_all(y + y).backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_conv_pool_chain_finite_differences(self):
        rng = np.random.default_rng(7)
        x = rng.random((2, 2, 4, 4))

        def loss(p):
            h = E.maxpool2(E.relu(E.conv2d(p["x"], p["k"], p["b"])))
            return E.sum_all(E.square(E.tanh(h)))

        params = {"x": x, "k": rng.normal(size=(3, 2, 3, 3)), "b": rng.normal(size=3)}
        for _, _, a, n in finite_difference_check(loss, params, 25, seed=2):
            assert relative_error(a, n) < 1e-3

    def test_take_rows_and_clamp_gradients(self):
        rng = np.random.default_rng(8)

        def loss(p):
            g = E.take_rows(p["d"], np.array([0, 2, 2, 1]))
            return E.sum_all(E.square(E.clamp(E.add(p["x"], g), 0.0, 1.0)))

        params = {"d": rng.normal(size=(3, 5)) * 0.1, "x": rng.random((4, 5)) * 0.8 + 0.1}
        for _, _, a, n in finite_difference_check(loss, params, 20, seed=3):
            assert relative_error(a, n) < 1e-3


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = [np.zeros(1, np.float32)]
        adam_step(p, [np.ones(1, np.float32)], AdamState(weight_decay=0.0), lr=0.1)
        # m̂ = 1, v̂ = 1  ->  update = 0.1 · 1 / (1 + 1e-8)
        assert p[0][0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-6)

    def test_zero_gradient_no_decay_keeps_params(self):
        p = [np.array([0.5, -2.0], np.float32)]
        adam_step(p, [np.zeros(2, np.float32)], AdamState(weight_decay=0.0), lr=0.1)
        np.testing.assert_array_equal(p[0], [0.5, -2.0])

    def test_weight_decay_pulls_toward_zero(self):
        p = [np.ones(1, np.float32)]
        adam_step(p, [np.zeros(1, np.float32)], AdamState(weight_decay=5e-4), lr=0.1)
        assert p[0][0] < 1.0

    def test_state_shapes_and_step_counter(self):
        params = [np.zeros((2, 3), np.float32), np.zeros(4, np.float32)]
        state = AdamState.for_params(params)
        for expected in (1, 2, 3):
            adam_step(params, [np.ones_like(q) for q in params], state, 1e-3)
            assert state.step == expected
        assert [m.shape for m in state.m] == [(2, 3), (4,)]
        assert [v.shape for v in state.v] == [(2, 3), (4,)]

    def test_matches_hand_recurrence_over_steps(self):
        g_seq = [0.3, -0.1, 0.7]
        p = [np.array([1.0], np.float64)]
        state = AdamState(weight_decay=5e-4)
        theta, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate(g_seq, start=1):
            adam_step(p, [np.array([g])], state, 0.01)
            ge = g + 5e-4 * theta
            m = 0.9 * m + 0.1 * ge
            v = 0.999 * v + 0.001 * ge * ge
            theta -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
            assert p[0][0] == pytest.approx(theta, rel=1e-12)


class TestCosine:
    s = CosineSchedule(lr_max=1e-3, lr_min=1e-5, total_steps=100)

    def test_endpoints(self):
        assert cosine_lr(0, self.s) == 1e-3
        assert cosine_lr(100, self.s) == 1e-5

    def test_midpoint(self):
        assert cosine_lr(50, self.s) == pytest.approx((1e-3 + 1e-5) / 2, rel=1e-12)

    def test_clamps_out_of_range(self):
        assert cosine_lr(-5, self.s) == 1e-3
        assert cosine_lr(500, self.s) == 1e-5

    @given(st.integers(1, 500), st.floats(1e-6, 1.0), st.floats(0.0, 1.0))
    def test_bounded_and_non_increasing(self, total, lr_max, frac):
        s = CosineSchedule(lr_max, lr_max * frac, total)
        values = [cosine_lr(t, s) for t in range(total + 1)]
        assert all(s.lr_min <= v <= s.lr_max for v in values)
        assert all(b <= a for a, b in zip(values, values[1:]))


def test_float32_by_default():
    out = E.linear(Tensor([[1, 2]]), Tensor([[1], [1]]), Tensor([0]))
    assert out.dtype == np.float32
