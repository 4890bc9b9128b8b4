import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from oracles import conv2d_loops, fd_grad, rel_err
from resample_bnn.tensor import (
    Tensor,
    add,
    conv2d,
    dense,
    div,
    log,
    maxpool2d,
    mul,
    no_grad,
    relu,
    softmax,
    softmax_cross_entropy,
    softplus,
    tanh,
)

RNG = np.random.default_rng(20240901)


def check_grad(build, x0, tol=1e-6, h=1e-5):
    """Compare autodiff gradient of sum(op(x)) against central differences."""
    x = Tensor(x0.copy(), requires_grad=True)
    out = build(x)
    out.sum().backward()
    numeric = fd_grad(lambda a: float(build(Tensor(a)).data.sum()), x0, h=h)
    assert x.grad.shape == x0.shape
    assert rel_err(x.grad, numeric) < tol


class TestConv2d:
    def test_zero_input(self):
        x = Tensor(np.zeros((1, 1, 3, 3)))
        k = Tensor(RNG.standard_normal((1, 1, 3, 3)))
        out = conv2d(x, k)
        assert out.shape == (1, 1, 1, 1)
        assert_array_equal(out.data, 0.0)

    def test_scalar_kernel_scales(self):
        x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        k = Tensor(np.full((1, 1, 1, 1), 2.0))
        out = conv2d(x, k)
        assert_allclose(out.data[0, 0], [[2.0, 4.0], [6.0, 8.0]])

    def test_matches_loop_oracle(self):
        x = RNG.standard_normal((2, 3, 7, 6))
        k = RNG.standard_normal((4, 3, 3, 3))
        for stride in (1, 2):
            got = conv2d(Tensor(x), Tensor(k), stride=stride).data
            assert_allclose(got, conv2d_loops(x, k, stride=stride), atol=1e-12)

    def test_same_padding_shape(self):
        x = Tensor(RNG.standard_normal((1, 1, 7, 7)))
        k = Tensor(RNG.standard_normal((2, 1, 3, 3)))
        assert conv2d(x, k, stride=1, padding="same").shape == (1, 2, 7, 7)
        assert conv2d(x, k, stride=2, padding="same").shape == (1, 2, 4, 4)

    def test_kernel_gradient_vs_fd(self):
        x = RNG.standard_normal((1, 2, 8, 8))
        k0 = RNG.standard_normal((3, 2, 3, 3))

        k = Tensor(k0.copy(), requires_grad=True)
        conv2d(Tensor(x), k).sum().backward()
        numeric = fd_grad(
            lambda a: float(conv2d(Tensor(x), Tensor(a)).data.sum()), k0)
        assert rel_err(k.grad, numeric) < 1e-6

    def test_input_gradient_vs_fd(self):
        k = RNG.standard_normal((2, 2, 3, 3))
        x0 = RNG.standard_normal((1, 2, 6, 5))
        check_grad(lambda x: conv2d(x, Tensor(k), stride=2, padding="same"), x0)

    def test_linearity(self):
        x = RNG.standard_normal((1, 1, 6, 6))
        y = RNG.standard_normal((1, 1, 6, 6))
        k = Tensor(RNG.standard_normal((2, 1, 3, 3)))
        a, b = 1.7, -0.3
        lhs = conv2d(Tensor(a * x + b * y), k).data
        rhs = a * conv2d(Tensor(x), k).data + b * conv2d(Tensor(y), k).data
        assert_allclose(lhs, rhs, atol=1e-12)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ValueError, match="channel"):
            conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_too_large_raises(self):
        with pytest.raises(ValueError, match="larger"):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


class TestDense:
    def test_identity(self):
        x = RNG.standard_normal((3, 4))
        out = dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        assert_array_equal(out.data, x)

    def test_zero_weight_gives_bias_rows(self):
        b = np.array([1.0, -2.0, 0.5])
        out = dense(Tensor(RNG.standard_normal((4, 6))),
                    Tensor(np.zeros((6, 3))), Tensor(b))
        assert_array_equal(out.data, np.tile(b, (4, 1)))

    def test_gradients_vs_fd(self):
        x0 = RNG.standard_normal((4, 6))
        w0 = RNG.standard_normal((6, 3))
        b0 = RNG.standard_normal(3)

        w = Tensor(w0.copy(), requires_grad=True)
        b = Tensor(b0.copy(), requires_grad=True)
        x = Tensor(x0.copy(), requires_grad=True)
        dense(x, w, b).sum().backward()

        num_w = fd_grad(lambda a: float(dense(Tensor(x0), Tensor(a), Tensor(b0)).data.sum()), w0)
        num_x = fd_grad(lambda a: float(dense(Tensor(a), Tensor(w0), Tensor(b0)).data.sum()), x0)
        num_b = fd_grad(lambda a: float(dense(Tensor(x0), Tensor(w0), Tensor(a)).data.sum()), b0)
        assert rel_err(w.grad, num_w) < 1e-6
        assert rel_err(x.grad, num_x) < 1e-6
        assert rel_err(b.grad, num_b) < 1e-6

    def test_dimension_mismatch_raises(self):
        with pytest.raises(ValueError, match="inner dimensions"):
            dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


class TestActivationsAndPool:
    def test_relu_values(self):
        out = relu(Tensor([-1.0, 0.0, 2.0]))
        assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_maxpool_values(self):
        out = maxpool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2)
        assert_array_equal(out.data, [[[[4.0]]]])

    def test_tanh_gradient_vs_fd(self):
        x0 = RNG.standard_normal((3, 3))
        check_grad(tanh, x0, tol=1e-7)

    def test_relu_gradient_vs_fd(self):
        x0 = RNG.standard_normal((4, 4)) + 0.05  # keep clear of the kink
        check_grad(relu, x0)

    def test_maxpool_gradient_routes_to_argmax(self):
        x = Tensor(np.array([[[[1.0, 5.0], [3.0, 4.0]]]]), requires_grad=True)
        maxpool2d(x, 2).sum().backward()
        assert_array_equal(x.grad[0, 0], [[0.0, 1.0], [0.0, 0.0]])

    def test_maxpool_tie_breaks_first_index(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        maxpool2d(x, 2).sum().backward()
        assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_maxpool_overlapping_gradient_vs_fd(self):
        x0 = RNG.standard_normal((1, 1, 5, 5))
        check_grad(lambda x: maxpool2d(x, 3, 1), x0)

    def test_maxpool_gradient_vs_fd(self):
        x0 = RNG.standard_normal((2, 2, 6, 6))
        check_grad(lambda x: maxpool2d(x, 2, 2), x0)

    def test_window_too_large_raises(self):
        with pytest.raises(ValueError, match="window"):
            maxpool2d(Tensor(np.zeros((1, 1, 2, 2))), 3)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = softmax_cross_entropy(Tensor([[0.0, 0.0]]), np.array([0]))
        assert_allclose(float(loss.data), np.log(2.0), atol=1e-12)

    def test_extreme_logits_stable(self):
        loss = softmax_cross_entropy(Tensor([[1000.0, 0.0]]), np.array([0]))
        assert np.isfinite(loss.data)
        assert float(loss.data) < 1e-10

    def test_gradient_is_softmax_minus_onehot(self):
        logits0 = RNG.standard_normal((5, 2))
        labels = RNG.integers(0, 2, size=5)
        t = Tensor(logits0.copy(), requires_grad=True)
        softmax_cross_entropy(t, labels).backward()

        probs = softmax(logits0)
        onehot = np.eye(2)[labels]
        assert_allclose(t.grad, (probs - onehot) / 5, atol=1e-12)

        numeric = fd_grad(
            lambda a: float(softmax_cross_entropy(Tensor(a), labels).data), logits0)
        assert rel_err(t.grad, numeric) < 1e-6

    def test_label_out_of_range_raises(self):
        with pytest.raises(ValueError, match="labels"):
            softmax_cross_entropy(Tensor(np.zeros((2, 2))), np.array([0, 2]))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_softmax_rows_sum_to_one(self, seed):
        logits = np.random.default_rng(seed).standard_normal((4, 3)) * 50
        probs = softmax(logits)
        assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert (probs > 0).all()


class TestElementwiseGrads:
    def test_add_mul_div_broadcast_vs_fd(self):
        a0 = RNG.standard_normal((3, 4))
        b = RNG.standard_normal((4,)) + 3.0
        check_grad(lambda x: add(x, Tensor(b)), a0)
        check_grad(lambda x: mul(x, Tensor(b)), a0)
        check_grad(lambda x: div(x, Tensor(b)), a0)
        check_grad(lambda x: div(Tensor(b), x), a0 + 5.0)

    def test_log_softplus_vs_fd(self):
        x0 = RNG.random((3, 3)) + 0.5
        check_grad(log, x0)
        check_grad(softplus, RNG.standard_normal((3, 3)) * 4)

    def test_sum_axis_and_reshape_vs_fd(self):
        x0 = RNG.standard_normal((2, 3, 4))
        check_grad(lambda x: x.sum(axis=1), x0)
        check_grad(lambda x: x.sum(axis=(0, 2), keepdims=True), x0)
        check_grad(lambda x: x.reshape((6, 4)), x0)

    def test_grad_accumulates_on_reuse(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        (mul(x, x) + x).sum().backward()
        assert_allclose(x.grad, [5.0])


class TestGraphMechanics:
    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (x * 2).backward()

    def test_all_parameters_reachable_get_grads(self):
        x = Tensor(RNG.standard_normal((2, 1, 6, 6)))
        k1 = Tensor(RNG.standard_normal((2, 1, 3, 3)), requires_grad=True)
        w = Tensor(RNG.standard_normal((8, 2)), requires_grad=True)
        b = Tensor(np.zeros(2), requires_grad=True)
        h = maxpool2d(relu(conv2d(x, k1)), 2)
        logits = dense(h.reshape((2, 8)), w, b)
        softmax_cross_entropy(logits, np.array([0, 1])).backward()
        for p in (k1, w, b):
            assert p.grad is not None and p.grad.shape == p.shape

    def test_no_grad_builds_no_graph(self):
        x = Tensor(RNG.standard_normal((2, 2)), requires_grad=True)
        with no_grad():
            out = mul(x, x)
        assert out._backward is None and out._parents == ()

    def test_forward_backward_deterministic(self):
        def run():
            rng = np.random.default_rng(99)
            x = Tensor(rng.standard_normal((2, 1, 8, 8)))
            k = Tensor(rng.standard_normal((3, 1, 3, 3)), requires_grad=True)
            out = maxpool2d(relu(conv2d(x, k, stride=2)), 2)
            out.sum().backward()
            return out.data.tobytes(), k.grad.tobytes()

        assert run() == run()

    def test_independent_graphs_on_threads(self):
        results = {}

        def work(tag, seed):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.standard_normal((2, 4)))
            w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
            dense(x, w).sum().backward()
            results[tag] = w.grad.copy()

        threads = [threading.Thread(target=work, args=(i, 7)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for i in range(1, 4):
            assert_array_equal(results[0], results[i])

    def test_require_finite_raises(self):
        from resample_bnn.tensor import NonFiniteError

        with pytest.raises(NonFiniteError):
            Tensor(np.array([1.0, np.nan])).require_finite("test")
