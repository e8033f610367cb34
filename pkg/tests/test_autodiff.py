"""Gradient engine tests.

Every differentiable primitive is checked against central finite
differences in float64, and the optimizer against hand-computed update
values frozen here as literals.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protolab.autodiff import (PROB_FLOOR, ArrayOps, RMSpropState, Tape,
                               TensorOps, argmax_one_hot, backward,
                               one_hot_rows, rmsprop_step)
from protolab.errors import TrainingDivergedError, UsageError


def fd_gradient(fn, x, eps=1e-6):
    """Central-difference gradient of a scalar-valued fn at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = fn(x)
        flat[i] = keep - eps
        lo = fn(x)
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


def check_unary(build, x0, tol=1e-7):
    """build(ops, tensor) -> scalar tensor; compares tape grad to FD."""
    tape = Tape(dtype=np.float64)
    ops = TensorOps(tape)
    x = tape.leaf(np.asarray(x0, dtype=np.float64))
    loss = build(ops, x)
    backward(tape, loss)

    def scalar(v):
        t2 = Tape(dtype=np.float64)
        o2 = TensorOps(t2)
        return float(build(o2, t2.leaf(v)).data)

    fd = fd_gradient(scalar, np.asarray(x0, dtype=np.float64))
    assert rel_err(x.grad, fd) < tol


RNG = np.random.default_rng(1234)


class TestPrimitiveGradients:
    def test_matmul(self):
        a0 = RNG.standard_normal((3, 4))
        b0 = RNG.standard_normal((4, 2))
        tape = Tape(dtype=np.float64)
        ops = TensorOps(tape)
        a = tape.leaf(a0.copy())
        b = tape.leaf(b0.copy())
        loss = ops.mean_all(ops.matmul(a, b))
        backward(tape, loss)

        def f_a(v):
            return float(np.mean(v @ b0))

        def f_b(v):
            return float(np.mean(a0 @ v))

        assert rel_err(a.grad, fd_gradient(f_a, a0)) < 1e-8
        assert rel_err(b.grad, fd_gradient(f_b, b0)) < 1e-8

    def test_add_same_shape(self):
        x0 = RNG.standard_normal((3, 4))
        check_unary(lambda ops, x: ops.mean_all(ops.add(x, ops.constant(
            np.ones((3, 4)) * 0.5)), ), x0)

    def test_add_bias_broadcast(self):
        b0 = RNG.standard_normal(4)
        base = RNG.standard_normal((3, 4))
        tape = Tape(dtype=np.float64)
        ops = TensorOps(tape)
        b = tape.leaf(b0.copy())
        loss = ops.mean_all(ops.mul(ops.add(ops.constant(base), b),
                                    ops.constant(base)))
        backward(tape, loss)

        def f(v):
            return float(np.mean((base + v) * base))

        assert rel_err(b.grad, fd_gradient(f, b0)) < 1e-8

    def test_mul(self):
        x0 = RNG.standard_normal((2, 5))
        other = RNG.standard_normal((2, 5))
        check_unary(lambda ops, x: ops.mean_all(
            ops.mul(x, ops.constant(other))), x0)

    def test_sigmoid(self):
        check_unary(lambda ops, x: ops.mean_all(ops.sigmoid(x)),
                    RNG.standard_normal((3, 4)) * 3)

    def test_tanh(self):
        check_unary(lambda ops, x: ops.mean_all(ops.tanh(x)),
                    RNG.standard_normal((3, 4)) * 2)

    def test_relu(self):
        # keep probes away from the kink at 0
        x0 = RNG.standard_normal((3, 4))
        x0[np.abs(x0) < 0.05] = 0.5
        check_unary(lambda ops, x: ops.mean_all(ops.relu(x)), x0)

    def test_softmax(self):
        x0 = RNG.standard_normal((4, 5))
        w = RNG.standard_normal((4, 5))
        check_unary(lambda ops, x: ops.mean_all(
            ops.mul(ops.softmax(x), ops.constant(w))), x0)

    def test_log(self):
        x0 = np.abs(RNG.standard_normal((3, 4))) + 0.5
        check_unary(lambda ops, x: ops.mean_all(ops.log(x)), x0)

    def test_exp(self):
        check_unary(lambda ops, x: ops.mean_all(ops.exp(x)),
                    RNG.standard_normal((3, 4)))

    def test_scale(self):
        check_unary(lambda ops, x: ops.mean_all(ops.scale(x, 2.5)),
                    RNG.standard_normal((3, 4)))

    def test_concat_and_slice(self):
        x0 = RNG.standard_normal((3, 4))
        other = RNG.standard_normal((3, 2))

        def build(ops, x):
            joined = ops.concat([x, ops.constant(other)])
            return ops.mean_all(ops.mul(joined, joined))

        check_unary(build, x0)
        check_unary(lambda ops, x: ops.mean_all(ops.slice_cols(x, 1, 3)), x0)

    def test_gather_cols(self):
        # Row-wise reindex, same width in and out (a permutation per row
        # with possible repeats so accumulation is exercised too).
        x0 = RNG.standard_normal((3, 5))
        idx = np.array([[1, 0, 2, 4, 3], [4, 4, 0, 1, 2], [2, 3, 1, 0, 0]])
        w = RNG.standard_normal((3, 5))
        check_unary(lambda ops, x: ops.mean_all(
            ops.mul(ops.gather_cols(x, idx), ops.constant(w))), x0)

    def test_row_max(self):
        # keep rows with a unique max so the subgradient is the gradient
        x0 = np.array([[0.1, 0.9, 0.3], [2.0, -1.0, 0.5]])
        check_unary(lambda ops, x: ops.mean_all(ops.row_max(x)), x0)

    def test_cce(self):
        logits = RNG.standard_normal((4, 3))
        target = one_hot_rows(np.array([0, 2, 1, 1]), 3)

        def build(ops, x):
            return ops.cce(ops.softmax(x), ops.constant(target))

        check_unary(build, logits)

    def test_cce_clamps_at_floor(self):
        pred = np.array([[1.0, 0.0, 0.0]])
        target = np.array([[0.0, 1.0, 0.0]])
        value = ArrayOps.cce(pred, target)
        assert np.isfinite(value)
        assert value == pytest.approx(-np.log(PROB_FLOOR))


class TestCceValues:
    def test_known_value(self):
        pred = np.array([[0.1, 0.8, 0.1]])
        target = np.array([[0.0, 1.0, 0.0]])
        # -ln(0.8) = 0.2231435513
        assert ArrayOps.cce(pred, target) == pytest.approx(
            0.22314355131420976, abs=1e-12)

    def test_mean_over_rows(self):
        pred = np.array([[0.5, 0.5], [0.25, 0.75]])
        target = np.array([[1.0, 0.0], [0.0, 1.0]])
        expected = (-np.log(0.5) - np.log(0.75)) / 2.0
        assert ArrayOps.cce(pred, target) == pytest.approx(expected,
                                                                 abs=1e-12)


class TestBackwardMechanics:
    def test_requires_scalar_loss(self):
        tape = Tape()
        ops = TensorOps(tape)
        x = tape.leaf(np.ones((2, 2)))
        with pytest.raises(UsageError):
            backward(tape, ops.mul(x, x))

    def test_grad_accumulates_across_reuse(self):
        tape = Tape(dtype=np.float64)
        ops = TensorOps(tape)
        x = tape.leaf(np.array([[2.0]]))
        loss = ops.mean_all(ops.add(ops.mul(x, x), x))  # x^2 + x
        backward(tape, loss)
        assert x.grad[0, 0] == pytest.approx(5.0)  # 2x + 1 at x=2

    def test_constants_get_no_grad(self):
        tape = Tape()
        ops = TensorOps(tape)
        x = tape.leaf(np.ones((1, 1)))
        c = tape.constant(np.ones((1, 1)) * 3.0)
        backward(tape, ops.mean_all(ops.mul(x, c)))
        assert c.grad is None
        assert x.grad[0, 0] == pytest.approx(3.0)


class TestRmsprop:
    def test_single_step_hand_value(self):
        # v1 = 0.9*0 + 0.1*1 = 0.1; dp = -0.01*1/(sqrt(0.1)+1e-7)
        state = RMSpropState()
        params = {"w": np.array([1.0], dtype=np.float64)}
        grads = {"w": np.array([1.0], dtype=np.float64)}
        rmsprop_step(state, params, grads)
        expected = 1.0 - 0.01 * 1.0 / (np.sqrt(0.1) + 1e-7)
        assert params["w"][0] == pytest.approx(expected, abs=1e-12)
        assert params["w"][0] == pytest.approx(1.0 - 0.031622766602, abs=1e-10)

    def test_two_steps_hand_value(self):
        # v2 = 0.9*0.1 + 0.1*1 = 0.19; dp2 = -0.01/(sqrt(0.19)+1e-7)
        state = RMSpropState()
        params = {"w": np.array([0.0], dtype=np.float64)}
        grads = {"w": np.array([1.0], dtype=np.float64)}
        rmsprop_step(state, params, grads)
        first = params["w"][0]
        rmsprop_step(state, params, grads)
        second = params["w"][0] - first
        assert state.second_moment["w"][0] == pytest.approx(0.19, abs=1e-12)
        assert second == pytest.approx(-0.01 / (np.sqrt(0.19) + 1e-7), abs=1e-12)
        assert second == pytest.approx(-0.022941568124, abs=1e-10)

    def test_nonfinite_gradient_raises(self):
        state = RMSpropState()
        params = {"w": np.array([1.0])}
        grads = {"w": np.array([np.nan])}
        with pytest.raises(TrainingDivergedError):
            rmsprop_step(state, params, grads)
        # parameters must be untouched after the failed update
        assert params["w"][0] == 1.0

    def test_state_keyed_per_parameter(self):
        state = RMSpropState()
        params = {"a": np.zeros(1), "b": np.zeros(1)}
        rmsprop_step(state, params, {"a": np.ones(1), "b": np.full(1, 2.0)})
        assert state.second_moment["a"][0] == pytest.approx(0.1)
        assert state.second_moment["b"][0] == pytest.approx(0.4)


class TestHelpers:
    def test_one_hot_rows(self):
        out = one_hot_rows(np.array([2, 0]), 4)
        assert out.tolist() == [[0, 0, 1, 0], [1, 0, 0, 0]]

    def test_argmax_one_hot_breaks_ties_low(self):
        out = argmax_one_hot(np.array([[1.0, 1.0, 0.5]]))
        assert out.tolist() == [[1.0, 0.0, 0.0]]

    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=8))
    @settings(deadline=None, max_examples=50)
    def test_softmax_rows_sum_to_one(self, row):
        out = ArrayOps.softmax(np.array([row]))
        assert out.sum() == pytest.approx(1.0, abs=1e-6)
        assert (out >= 0).all()

    @given(st.integers(0, 6))
    @settings(deadline=None, max_examples=20)
    def test_one_hot_argmax_round_trip(self, idx):
        row = one_hot_rows(np.array([idx]), 7)
        assert row[0].argmax() == idx
