import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_diff, grads_match, param_fd
from ifssl.errors import ConfigurationError, DivergenceError
from ifssl.losses import nll_loss
from ifssl.netcore import (
    NetworkParams,
    OptimizerState,
    backward,
    cosine_lr,
    forward,
    init_params,
    sgd_nesterov_step,
    softmax,
    softmax_backward,
)


def reference_forward(params, x):
    """Loop-based forward pass, written independently of the library."""
    out = []
    n_layers = len(params.weights)
    for row in x:
        a = [float(v) for v in row]
        for k, (W, b) in enumerate(zip(params.weights, params.biases)):
            z = []
            for i in range(W.shape[0]):
                s = float(b[i])
                for j in range(W.shape[1]):
                    s += float(W[i, j]) * a[j]
                z.append(s)
            a = [math.tanh(v) for v in z] if k < n_layers - 1 else z
        out.append(a)
    return np.array(out)


class TestForward:
    def test_zero_weights_give_zero_logits(self):
        p = NetworkParams([np.zeros((3, 5))], [np.zeros(3)], "linear")
        x = np.random.default_rng(0).normal(size=(4, 5))
        assert np.array_equal(forward(p, x), np.zeros((4, 3)))

    def test_identity_layer(self):
        p = NetworkParams([np.eye(4)], [np.zeros(4)], "linear")
        v = np.array([[1.5, -2.0, 0.25, 7.0]])
        assert np.array_equal(forward(p, v), v)

    def test_matches_loop_reference(self):
        rng = np.random.default_rng(42)
        p = init_params([3, 6, 4], rng)
        p.biases[0][:] = rng.normal(size=6)
        x = rng.normal(size=(5, 3))
        assert np.max(np.abs(forward(p, x) - reference_forward(p, x))) <= 1e-12

    def test_shape_mismatch_is_rejected(self, small_net):
        with pytest.raises(ConfigurationError):
            forward(small_net, np.zeros((2, 4)))

    def test_unbatched_input_is_rejected(self, small_net):
        with pytest.raises(ConfigurationError):
            forward(small_net, np.array([0.1, 0.2, 0.3]))


class TestSoftmax:
    def test_symmetric(self):
        assert np.allclose(softmax(np.zeros(3)), [1 / 3] * 3, atol=1e-15)

    def test_closed_form(self):
        assert np.allclose(softmax(np.array([0.0, math.log(3.0)])), [0.25, 0.75], atol=1e-15)

    def test_saturates_without_overflow(self):
        p = softmax(np.array([1000.0, 0.0]))
        assert np.all(np.abs(p - [1.0, 0.0]) <= 1e-12)

    @given(arrays(np.float64, st.integers(2, 12), elements=st.floats(-1e6, 1e6)))
    def test_on_simplex(self, z):
        p = softmax(z)
        assert np.all(np.isfinite(p))
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) <= 1e-12

    @given(
        arrays(np.float64, st.integers(2, 10), elements=st.floats(-50, 50)),
        st.floats(-1e3, 1e3),
    )
    def test_shift_invariant(self, z, c):
        assert np.max(np.abs(softmax(z) - softmax(z + c))) <= 1e-12

    def test_backward_matches_jacobian(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=5)
        g = rng.normal(size=5)
        num = central_diff(lambda v: float(softmax(v) @ g), z)
        assert grads_match(softmax_backward(softmax(z), g), num)


class TestBackward:
    def test_zero_upstream_gives_zero(self, small_net):
        x = np.ones((2, 3))
        grads = backward(small_net, x, np.zeros((2, 3)))
        assert all(np.array_equal(t, np.zeros_like(t)) for t in grads.tensors())

    def test_linear_nll_closed_form(self):
        rng = np.random.default_rng(5)
        p = init_params([4, 3], rng, "linear")
        x = rng.normal(size=(1, 4))
        label = 2

        def loss_of_logits(z):
            return float(nll_loss(softmax(z), label))

        z = forward(p, x)[0]
        num = central_diff(loss_of_logits, z)
        closed = softmax(z) - np.eye(3)[label]
        assert grads_match(closed, num)

    @pytest.mark.parametrize("seed", range(8))
    @pytest.mark.parametrize("activation", ["tanh", "relu", "linear"])
    def test_param_gradients_match_fd(self, seed, activation):
        rng = np.random.default_rng(seed)
        p = init_params([3, 7, 5, 4], rng, activation)
        x = rng.normal(size=(6, 3))
        probe = rng.normal(size=(6, 4))

        def f(q):
            return float(np.sum(forward(q, x) * probe))

        analytic = backward(p, x, probe).tensors()
        numeric = param_fd(p, f)
        for a, n in zip(analytic, numeric):
            assert grads_match(a, n)


class TestNesterov:
    def one_param(self, w):
        return NetworkParams([np.array([[w]])], [np.zeros(1)], "linear")

    def grads(self, g):
        return NetworkParams([np.array([[g]])], [np.zeros(1)], "linear")

    def test_vanilla_sgd(self):
        p = self.one_param(1.0)
        st_ = OptimizerState.for_params(p, 0.1, momentum=0.0, weight_decay=0.0)
        q, _ = sgd_nesterov_step(p, self.grads(0.5), st_, 0.1)
        assert q.weights[0][0, 0] == pytest.approx(0.95, abs=1e-15)

    def test_pure_decay(self):
        p = self.one_param(1.0)
        st_ = OptimizerState.for_params(p, 0.1, momentum=0.0, weight_decay=0.1)
        q, _ = sgd_nesterov_step(p, self.grads(0.0), st_, 0.1)
        assert q.weights[0][0, 0] == pytest.approx(0.99, abs=1e-15)

    def test_two_momentum_steps_hand_unrolled(self):
        # step 1: buf = 1, w = 0 - 0.1*(1 + 0.9*1) = -0.19
        # step 2: buf = 0.9 + 1 = 1.9, w = -0.19 - 0.1*(1 + 0.9*1.9) = -0.461
        p = self.one_param(0.0)
        s = OptimizerState.for_params(p, 0.1, momentum=0.9, weight_decay=0.0)
        p, s = sgd_nesterov_step(p, self.grads(1.0), s, 0.1)
        assert p.weights[0][0, 0] == pytest.approx(-0.19, abs=1e-15)
        p, s = sgd_nesterov_step(p, self.grads(1.0), s, 0.1)
        assert p.weights[0][0, 0] == pytest.approx(-0.461, abs=1e-15)
        assert s.step == 2

    def test_non_finite_gradient_raises(self):
        p = self.one_param(0.0)
        s = OptimizerState.for_params(p, 0.1)
        with pytest.raises(DivergenceError):
            sgd_nesterov_step(p, self.grads(float("nan")), s, 0.1)

    def test_bad_settings_rejected(self):
        p = self.one_param(0.0)
        with pytest.raises(ConfigurationError):
            OptimizerState.for_params(p, 0.0)
        with pytest.raises(ConfigurationError):
            OptimizerState.for_params(p, 0.1, momentum=1.0)


class TestCosine:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 0.05, 100) == pytest.approx(0.05, abs=1e-15)
        assert cosine_lr(100, 0.05, 100) == pytest.approx(0.0, abs=1e-15)
        assert cosine_lr(50, 0.05, 100) == pytest.approx(0.025, abs=1e-15)

    def test_zero_total_rejected(self):
        with pytest.raises(ConfigurationError):
            cosine_lr(0, 0.05, 0)

    @given(st.integers(0, 200))
    def test_monotone_non_increasing(self, e):
        assert cosine_lr(e + 1, 1.0, 200) <= cosine_lr(e, 1.0, 200)


def test_trajectory_is_deterministic():
    def run():
        rng = np.random.default_rng(11)
        p = init_params([2, 8, 3], rng)
        s = OptimizerState.for_params(p, 0.05, 0.9, 1e-3)
        x = rng.normal(size=(16, 2))
        for _ in range(20):
            g = backward(p, x, softmax(forward(p, x)) - np.eye(3)[np.arange(16) % 3])
            p, s = sgd_nesterov_step(p, g, s, 0.05)
        return p

    assert run().equals(run())


def test_init_bounds():
    p = init_params([10, 30, 5], np.random.default_rng(0))
    for w in p.weights:
        limit = math.sqrt(6.0 / (w.shape[0] + w.shape[1]))
        assert np.all(np.abs(w) <= limit)
    assert all(np.array_equal(b, np.zeros_like(b)) for b in p.biases)
    with pytest.raises(ConfigurationError):
        init_params([3], np.random.default_rng(0))


@settings(max_examples=25)
@given(st.integers(0, 10_000))
def test_copy_is_independent(seed):
    p = init_params([2, 3, 2], np.random.default_rng(seed))
    q = p.copy()
    q.weights[0][0, 0] += 1.0
    assert not p.equals(q)
