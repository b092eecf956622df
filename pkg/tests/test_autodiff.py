"""Unit tests for the reverse-mode tape and its ops."""

import math

import numpy as np
import pytest

from lossnets.autodiff import (
    BatchNormState,
    Tape,
    Value,
    abs_diff,
    add,
    affine_const,
    batchnorm,
    compensated_colmean,
    dense,
    dropout,
    gather,
    leaky_relu,
    mean_all,
    mean_pool_rows,
    mul,
    outer_sub,
    reshape,
    softplus,
    stack_columns,
)


def fd_grad(f, x0, h=1e-6):
    """Central-difference gradient of scalar f at flat parameter vector x0."""
    g = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def check_op_grad(build, n_in, seed=0, h=1e-6, tol=1e-7):
    """FD-check d(mean of op output)/d(input) for an op closure."""
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=n_in)

    def scalar(xflat):
        tape = Tape()
        v = Value(xflat.copy())
        out = build(tape, v)
        return float(mean_all(tape, out).data)

    tape = Tape()
    v = Value(x0.copy())
    out = build(tape, v)
    root = mean_all(tape, out)
    tape.backward(root)
    fd = fd_grad(scalar, x0, h=h)
    assert np.allclose(v.grad, fd, atol=tol), f"max err {np.abs(v.grad - fd).max()}"


class TestValueAndTape:
    def test_grad_matches_data_shape(self):
        v = Value(np.zeros((3, 4)))
        assert v.grad.shape == (3, 4)
        with pytest.raises(ValueError, match="shape"):
            Value(np.zeros(3), grad=np.zeros(4))

    def test_backward_requires_scalar_root(self):
        tape = Tape()
        v = Value(np.ones(3))
        out = affine_const(tape, v, 2.0)
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(out)

    def test_fanout_accumulates(self):
        # x feeds two ops; grads from both must sum
        tape = Tape()
        x = Value(np.array([1.0, 2.0]))
        a = affine_const(tape, x, 3.0)
        b = affine_const(tape, x, 5.0)
        s = mean_all(tape, add(tape, a, b))
        tape.backward(s)
        assert np.allclose(x.grad, (3.0 + 5.0) / 2)

    def test_clear_empties_tape(self):
        tape = Tape()
        affine_const(tape, Value(np.ones(2)), 1.0)
        assert len(tape) == 1
        tape.clear()
        assert len(tape) == 0

    def test_ndarray_inputs_are_constants(self):
        tape = Tape()
        out = mean_all(tape, add(tape, np.ones(3), np.ones(3)))
        tape.backward(out)  # no Value inputs: must not crash
        assert float(out.data) == 2.0


class TestDense:
    def test_forward_matches_matmul(self):
        tape = Tape()
        x = np.arange(6.0).reshape(2, 3)
        w = Value(np.arange(12.0).reshape(3, 4))
        b = Value(np.arange(4.0))
        out = dense(tape, x, w, b)
        assert np.allclose(out.data, x @ w.data + b.data)

    def test_shape_mismatch_names_both_shapes(self):
        tape = Tape()
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 2\)"):
            dense(tape, np.zeros((2, 3)), Value(np.zeros((4, 2))), Value(np.zeros(2)))

    def test_gradients(self):
        rng = np.random.default_rng(1)
        w0 = rng.normal(size=(3, 4))
        b0 = rng.normal(size=4)
        x = rng.normal(size=(5, 3))

        def via(params):
            w, b = params[:12].reshape(3, 4), params[12:]
            tape = Tape()
            out = dense(tape, x, Value(w.copy()), Value(b.copy()))
            return float(mean_all(tape, out).data)

        tape = Tape()
        w, b = Value(w0.copy()), Value(b0.copy())
        root = mean_all(tape, dense(tape, x, w, b))
        tape.backward(root)
        fd = fd_grad(via, np.concatenate([w0.ravel(), b0]))
        assert np.allclose(np.concatenate([w.grad.ravel(), b.grad]), fd, atol=1e-8)

    def test_input_gradient(self):
        rng = np.random.default_rng(2)
        w = Value(rng.normal(size=(3, 2)))
        b = Value(rng.normal(size=2))
        check_op_grad(lambda t, v: dense(t, reshape(t, v, (4, 3)), w, b), 12, seed=3)


class TestActivationsAndElementwise:
    def test_leaky_relu_values(self):
        tape = Tape()
        out = leaky_relu(tape, Value(np.array([-2.0, 0.0, 3.0])), slope=0.1)
        assert np.allclose(out.data, [-0.2, 0.0, 3.0])

    def test_leaky_relu_grad(self):
        check_op_grad(lambda t, v: leaky_relu(t, v, 0.01), 7, seed=4)

    def test_relu_slope_zero(self):
        tape = Tape()
        out = leaky_relu(tape, Value(np.array([-1.0, 2.0])), slope=0.0)
        assert np.allclose(out.data, [0.0, 2.0])

    def test_softplus_stable_and_correct(self):
        tape = Tape()
        x = Value(np.array([-800.0, -1.0, 0.0, 1.0, 800.0]))
        out = softplus(tape, x)
        assert np.isfinite(out.data).all()
        assert np.allclose(out.data[1:4], np.log1p(np.exp([-1.0, 0.0, 1.0])))
        assert out.data[0] == 0.0 and np.isclose(out.data[4], 800.0)

    def test_softplus_grad(self):
        check_op_grad(softplus, 9, seed=5)

    def test_abs_diff_and_subgradient_zero_at_equality(self):
        tape = Tape()
        a = Value(np.array([1.0, 2.0, 5.0]))
        out = mean_all(tape, abs_diff(tape, a, np.array([3.0, 2.0, 1.0])))
        tape.backward(out)
        # |1-3|, |2-2|, |5-1| -> signs -1, 0, +1 scaled by 1/3
        assert np.allclose(a.grad, np.array([-1.0, 0.0, 1.0]) / 3)

    def test_abs_diff_scalar_const(self):
        tape = Tape()
        a = Value(np.asarray(0.75))
        out = abs_diff(tape, a, 0.5)
        tape.backward(out)
        assert float(out.data) == 0.25 and float(a.grad) == 1.0

    def test_add_mul_broadcast_grads(self):
        rng = np.random.default_rng(6)
        c = rng.normal(size=(4, 3))
        # scalar Value broadcast against a (4,3) constant
        def build(t, v):
            s = reshape(t, v, ())
            return mul(t, s, c)

        check_op_grad(build, 1, seed=7)

    def test_affine_const(self):
        tape = Tape()
        v = Value(np.array([1.0, -2.0]))
        out = affine_const(tape, v, scale=3.0, offset=1.0)
        assert np.allclose(out.data, [4.0, -5.0])
        root = mean_all(tape, out)
        tape.backward(root)
        assert np.allclose(v.grad, 1.5)


class TestBatchNorm:
    def test_train_normalizes_batch(self):
        tape = Tape()
        rng = np.random.default_rng(8)
        x = rng.normal(3.0, 2.0, size=(64, 5))
        state = BatchNormState(5)
        out = batchnorm(tape, x, Value(np.ones(5)), Value(np.zeros(5)), state, "train")
        assert np.allclose(out.data.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(out.data.var(axis=0), 1.0, atol=1e-3)

    def test_running_stats_decay(self):
        state = BatchNormState(2, momentum=0.9)
        x = np.array([[1.0, 10.0], [3.0, 20.0]])
        tape = Tape()
        batchnorm(tape, x, Value(np.ones(2)), Value(np.zeros(2)), state, "train")
        # running = 0.9 * old + 0.1 * batch
        assert np.allclose(state.running_mean, 0.1 * np.array([2.0, 15.0]))
        assert np.allclose(state.running_var, 0.9 * 1.0 + 0.1 * np.array([1.0, 25.0]))

    def test_eval_uses_running_stats(self):
        state = BatchNormState(1, eps=0.0)
        state.running_mean[...] = 2.0
        state.running_var[...] = 4.0
        tape = Tape()
        out = batchnorm(tape, np.array([[4.0]]), Value(np.ones(1)), Value(np.zeros(1)), state, "eval")
        assert np.allclose(out.data, (4.0 - 2.0) / 2.0)

    def test_train_needs_two_rows(self):
        with pytest.raises(ValueError, match="N >= 2"):
            batchnorm(Tape(), np.zeros((1, 3)), Value(np.ones(3)), Value(np.zeros(3)),
                      BatchNormState(3), "train")

    def test_bad_mode(self):
        with pytest.raises(ValueError, match="mode"):
            batchnorm(Tape(), np.zeros((2, 3)), Value(np.ones(3)), Value(np.zeros(3)),
                      BatchNormState(3), "test")

    def test_gradient_through_batch_stats(self):
        # input gradient must include the mean/var pathways
        scale = Value(np.array([1.3, -0.7, 0.4]))
        shift = Value(np.array([0.1, 0.2, -0.5]))

        def build(t, v):
            x = reshape(t, v, (6, 3))
            return batchnorm(t, x, scale, shift, BatchNormState(3), "train")

        check_op_grad(build, 18, seed=9, tol=1e-6)

    def test_scale_shift_gradients(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(8, 2))

        def via(p):
            tape = Tape()
            out = batchnorm(tape, x, Value(p[:2].copy()), Value(p[2:].copy()),
                            BatchNormState(2), "train")
            return float(mean_all(tape, out).data)

        tape = Tape()
        scale, shift = Value(np.array([1.1, 0.9])), Value(np.array([0.0, 0.3]))
        root = mean_all(tape, batchnorm(tape, x, scale, shift, BatchNormState(2), "train"))
        tape.backward(root)
        fd = fd_grad(via, np.array([1.1, 0.9, 0.0, 0.3]))
        assert np.allclose(np.concatenate([scale.grad, shift.grad]), fd, atol=1e-8)


class TestDropout:
    def test_eval_is_identity(self):
        tape = Tape()
        v = Value(np.ones(5))
        assert dropout(tape, v, 0.5, "eval") is v
        assert len(tape) == 0

    def test_rate_zero_is_identity(self):
        tape = Tape()
        v = Value(np.ones(5))
        assert dropout(tape, v, 0.0, "train", np.random.default_rng(0)) is v

    def test_zeroes_and_rescales(self):
        rng = np.random.default_rng(11)
        tape = Tape()
        v = Value(np.ones((200, 50)))
        out = dropout(tape, v, 0.2, "train", rng)
        dropped = out.data == 0.0
        kept = ~dropped
        assert abs(dropped.mean() - 0.2) < 0.02
        assert np.allclose(out.data[kept], 1.0 / 0.8)

    def test_grad_masks_match_forward(self):
        rng = np.random.default_rng(12)
        tape = Tape()
        v = Value(np.ones(100))
        out = dropout(tape, v, 0.4, "train", rng)
        root = mean_all(tape, out)
        tape.backward(root)
        assert np.allclose(v.grad * 100, np.where(out.data > 0, 1 / 0.6, 0.0))

    def test_rate_validation(self):
        for bad in (-0.1, 1.0, 1.5):
            with pytest.raises(ValueError, match="rate"):
                dropout(Tape(), Value(np.ones(2)), bad, "train", np.random.default_rng(0))

    def test_train_needs_rng(self):
        with pytest.raises(ValueError, match="rng"):
            dropout(Tape(), Value(np.ones(2)), 0.5, "train")


class TestPoolingAndShaping:
    def test_mean_pool_matches_mean(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(100, 30))
        tape = Tape()
        out = mean_pool_rows(tape, Value(x.copy()))
        assert np.allclose(out.data, x.mean(axis=0), rtol=1e-14, atol=1e-14)

    def test_compensated_colmean_matches_fsum(self):
        # adversarial magnitudes: compensation must hold where naive drifts
        rng = np.random.default_rng(14)
        x = rng.normal(size=(257, 3)) * np.exp(rng.uniform(-8, 8, size=(257, 3)))
        ours = compensated_colmean(x)
        exact = np.array([math.fsum(x[:, j]) / x.shape[0] for j in range(3)])
        assert np.allclose(ours, exact, rtol=1e-15, atol=0)

    def test_pool_permutation_stability(self):
        rng = np.random.default_rng(15)
        x = rng.normal(size=(128, 7))
        base = compensated_colmean(x)
        for _ in range(20):
            p = rng.permutation(128)
            assert np.allclose(compensated_colmean(x[p]), base, rtol=1e-12, atol=0)

    def test_pool_backward_is_uniform(self):
        tape = Tape()
        v = Value(np.arange(12.0).reshape(4, 3))
        root = mean_all(tape, mean_pool_rows(tape, v))
        tape.backward(root)
        assert np.allclose(v.grad, 1.0 / 12)

    def test_reshape_round_trips_grad(self):
        check_op_grad(lambda t, v: reshape(t, v, (2, 5)), 10, seed=16)

    def test_stack_columns_routes_grad(self):
        tape = Tape()
        y = np.array([0.0, 1.0, 1.0])
        s = Value(np.array([0.5, -0.5, 2.0]))
        out = stack_columns(tape, [y, s])
        assert out.data.shape == (3, 2)
        root = mean_all(tape, mul(tape, out, np.array([[10.0, 1.0]] * 3)))
        tape.backward(root)
        assert np.allclose(s.grad, 1.0 / 6)  # only the second column reaches s


class TestPairwiseAndGather:
    def test_outer_sub_values_and_grads(self):
        tape = Tape()
        a = Value(np.array([1.0, 2.0]))
        b = Value(np.array([10.0, 20.0, 30.0]))
        out = outer_sub(tape, a, b)
        assert np.allclose(out.data, a.data[:, None] - b.data[None, :])
        root = mean_all(tape, out)
        tape.backward(root)
        assert np.allclose(a.grad, 3.0 / 6)
        assert np.allclose(b.grad, -2.0 / 6)

    def test_gather_accumulates_duplicates(self):
        tape = Tape()
        v = Value(np.array([1.0, 2.0, 3.0]))
        out = gather(tape, v, np.array([0, 0, 2]))
        root = mean_all(tape, out)
        tape.backward(root)
        assert np.allclose(v.grad, [2 / 3, 0.0, 1 / 3])
