import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lorafuse.numerics import (
    AdamState,
    GradTape,
    Tensor2,
    adam_step,
    add,
    attention_rows,
    cross_entropy_nll,
    embed_rows,
    finite_diff_grad,
    gelu,
    layer_norm_rows,
    masked_row_add,
    matmul,
    scale,
    softmax_rows,
    transpose,
)


def matmul_oracle(a, b):
    """Hand triple-loop product."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self):
        m = Tensor2([[3.0, -1.0], [2.5, 7.0]])
        eye = Tensor2(np.eye(2))
        assert np.array_equal(matmul(eye, m).data, m.data)

    def test_zeros(self):
        z = Tensor2(np.zeros((2, 3)))
        m = Tensor2(np.arange(12.0).reshape(3, 4))
        assert np.array_equal(matmul(z, m).data, np.zeros((2, 4)))

    def test_hand_oracle(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        got = matmul(Tensor2(a), Tensor2(b)).data
        assert np.allclose(got, matmul_oracle(a, b))
        assert np.allclose(got, [[19.0, 22.0], [43.0, 50.0]])

    def test_random_vs_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            a = rng.normal(size=(3, 5))
            b = rng.normal(size=(5, 2))
            assert np.allclose(
                matmul(Tensor2(a), Tensor2(b)).data, matmul_oracle(a, b), atol=1e-6
            )

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            matmul(Tensor2(np.ones((2, 3))), Tensor2(np.ones((2, 3))))


class TestSoftmaxRows:
    def test_uniform(self):
        out = softmax_rows(Tensor2(np.zeros((1, 4)))).data
        assert np.allclose(out, 0.25)

    def test_dominance(self):
        out = softmax_rows(Tensor2([[1000.0, 0.0]])).data
        assert out[0, 0] > 1.0 - 1e-6
        assert out[0, 1] < 1e-6

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        row = rng.normal(size=(1, 8))
        a = softmax_rows(Tensor2(row)).data
        b = softmax_rows(Tensor2(row + 123.456)).data
        assert np.allclose(a, b, atol=1e-6)

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(
            np.float64,
            st.tuples(st.integers(1, 6), st.integers(1, 8)),
            elements=st.floats(-1e4, 1e4),
        )
    )
    def test_rows_sum_to_one(self, m):
        out = softmax_rows(Tensor2(m)).data
        assert np.all(out >= 0)
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(2)
        x0 = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 4))  # fixed mixing weights reduce rows to a scalar

        def f(x):
            return float((softmax_rows(Tensor2(x)).data * w).sum())

        fd = finite_diff_grad(f, x0, 1e-6)
        p = softmax_rows(Tensor2(x0)).data
        inner = (w * p).sum(axis=1, keepdims=True)
        analytic = p * (w - inner)  # the op's pullback applied to dL/dp = w
        assert np.allclose(analytic, fd, atol=1e-5)


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = Tensor2(np.zeros((4, 16)))
        loss, grad = cross_entropy_nll(logits, [0, 5, 9, 15])
        assert abs(float(loss.data[0, 0]) - np.log(16)) < 1e-6

    def test_confident_target(self):
        logits = np.zeros((2, 16))
        logits[0, 3] = 20.0
        logits[1, 7] = 20.0
        loss, _ = cross_entropy_nll(Tensor2(logits), [3, 7])
        assert float(loss.data[0, 0]) < 1e-6

    def test_gradient_identity(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(5, 7))
        targets = rng.integers(0, 7, size=5)
        _, grad = cross_entropy_nll(Tensor2(logits), targets)
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        onehot = np.zeros_like(p)
        onehot[np.arange(5), targets] = 1.0
        assert np.allclose(grad, (p - onehot) / 5, atol=1e-6)

    def test_target_out_of_vocab(self):
        with pytest.raises(IndexError):
            cross_entropy_nll(Tensor2(np.zeros((2, 4))), [0, 4])


class TestAdam:
    def test_zero_gradient_noop(self):
        p = Tensor2(np.array([[1.0, -2.0]]))
        before = p.data.copy()
        adam_step([p], [np.zeros((1, 2))], AdamState())
        assert np.array_equal(p.data, before)

    def test_first_step_magnitude(self):
        p = Tensor2(np.zeros((1, 3)))
        g = np.array([[0.5, -2.0, 10.0]])
        state = AdamState(lr=1e-3)
        adam_step([p], [g], state)
        # bias-corrected first step is lr * sign(g), epsilon-limited
        assert np.allclose(np.abs(p.data), 1e-3, rtol=1e-4)
        assert np.all(np.sign(p.data) == -np.sign(g))

    def test_two_steps_reduce_quadratic(self):
        # scalar simulation oracle: minimize f(x) = x^2 from x = 1
        x = Tensor2(np.array([[1.0]]))
        state = AdamState(lr=0.1)
        f0 = float(x.data[0, 0]) ** 2
        for _ in range(2):
            g = np.array([[2.0 * float(x.data[0, 0])]])
            adam_step([x], [g], state)
        assert float(x.data[0, 0]) ** 2 < f0

    def test_nonfinite_gradient_aborts(self):
        p = Tensor2(np.zeros((1, 2)))
        with pytest.raises(FloatingPointError, match="non-finite"):
            adam_step([p], [np.array([[np.nan, 0.0]])], AdamState())


class TestFiniteDiff:
    def test_quadratic_exact(self):
        g = finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), eps=1e-3)
        assert abs(g[0] - 6.0) < 1e-9  # central difference is exact for quadratics

    def test_constant(self):
        g = finite_diff_grad(lambda x: 1.25, np.array([0.3, -0.7]), eps=1e-4)
        assert np.array_equal(g, np.zeros(2))

    def test_sine(self):
        g = finite_diff_grad(lambda x: float(np.sin(x[0])), np.array([0.0]), eps=1e-4)
        assert abs(g[0] - 1.0) < 1e-7

    def test_eps_validation(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda x: 0.0, np.array([1.0]), eps=0.0)


class TestTape:
    def test_frozen_params_never_accumulate(self):
        tape = GradTape()
        w = Tensor2(np.ones((2, 2)))  # frozen: never watched
        x = Tensor2(np.ones((2, 2)))
        tape.watch(x)
        loss, _ = cross_entropy_nll(matmul(x, w), [0, 1])
        tape.backward(loss)
        assert x.uid in tape.grads
        assert w.uid not in tape.grads
        assert tape.grad(x).shape == (2, 2)

    def test_unused_watched_param_gets_zeros(self):
        tape = GradTape()
        x = Tensor2(np.ones((1, 2)))
        unused = Tensor2(np.ones((3, 3)))
        tape.watch(x, unused)
        loss, _ = cross_entropy_nll(x, [0])
        tape.backward(loss)
        assert np.array_equal(tape.grad(unused), np.zeros((3, 3)))

    def test_mixed_tapes_rejected(self):
        t1, t2 = GradTape(), GradTape()
        a = Tensor2(np.ones((2, 2)))
        b = Tensor2(np.ones((2, 2)))
        t1.watch(a)
        t2.watch(b)
        with pytest.raises(ValueError, match="different tapes"):
            matmul(a, b)

    def test_release_detaches(self):
        tape = GradTape()
        a = Tensor2(np.ones((2, 2)))
        tape.watch(a)
        tape.release()
        assert a.tape is None

    def test_reused_input_accumulates(self):
        # y = x @ x: gradient must sum both paths
        x0 = np.array([[0.5, 1.0], [2.0, -1.0]])
        tape = GradTape()
        x = Tensor2(x0.copy())
        tape.watch(x)
        y = matmul(x, x)
        loss, _ = cross_entropy_nll(y, [0, 1])
        tape.backward(loss)

        def f(v):
            out, _ = cross_entropy_nll(Tensor2(v @ v), [0, 1])
            return float(out.data[0, 0])

        fd = finite_diff_grad(f, x0, 1e-6)
        assert np.allclose(tape.grad(x), fd, atol=1e-5)


def _op_grad_check(build, x0, atol=1e-7):
    """Backward of a taped pipeline vs central differences, float64."""
    tape = GradTape()
    x = Tensor2(x0.copy())
    tape.watch(x)
    loss = build(x)
    tape.backward(loss)

    def f(v):
        return float(build(Tensor2(v)).data[0, 0])

    fd = finite_diff_grad(f, x0, 1e-6)
    assert np.allclose(tape.grad(x), fd, atol=atol)


class TestOpGradients:
    def setup_method(self):
        self.rng = np.random.default_rng(7)

    def test_gelu(self):
        x0 = self.rng.normal(size=(3, 4))
        t = self.rng.integers(0, 4, size=3)
        _op_grad_check(lambda x: cross_entropy_nll(gelu(x), t)[0], x0)

    def test_layer_norm(self):
        x0 = self.rng.normal(size=(3, 6))
        g = Tensor2(self.rng.normal(size=(1, 6)))
        b = Tensor2(self.rng.normal(size=(1, 6)))
        t = self.rng.integers(0, 6, size=3)
        _op_grad_check(lambda x: cross_entropy_nll(layer_norm_rows(x, g, b), t)[0], x0)

    def test_layer_norm_gain_bias_grads(self):
        x = Tensor2(self.rng.normal(size=(3, 6)))
        g0 = self.rng.normal(size=(1, 6))
        b0 = self.rng.normal(size=(1, 6))
        t = self.rng.integers(0, 6, size=3)
        tape = GradTape()
        g = Tensor2(g0.copy())
        b = Tensor2(b0.copy())
        tape.watch(g, b)
        loss, _ = cross_entropy_nll(layer_norm_rows(x, g, b), t)
        tape.backward(loss)

        def f_g(v):
            out, _ = cross_entropy_nll(layer_norm_rows(x, Tensor2(v), Tensor2(b0)), t)
            return float(out.data[0, 0])

        fd = finite_diff_grad(f_g, g0, 1e-6)
        assert np.allclose(tape.grad(g), fd, atol=1e-7)

    def test_attention(self):
        x0 = self.rng.normal(size=(4, 8))
        k = Tensor2(self.rng.normal(size=(5, 8)))
        v = Tensor2(self.rng.normal(size=(5, 8)))
        t = self.rng.integers(0, 8, size=4)
        _op_grad_check(
            lambda x: cross_entropy_nll(attention_rows(x, k, v, heads=2), t)[0], x0
        )

    def test_attention_causal_k_grad(self):
        q0 = self.rng.normal(size=(4, 8))
        k0 = self.rng.normal(size=(4, 8))
        v = Tensor2(self.rng.normal(size=(4, 8)))
        t = self.rng.integers(0, 8, size=4)
        q = Tensor2(q0)
        tape = GradTape()
        k = Tensor2(k0.copy())
        tape.watch(k)
        loss, _ = cross_entropy_nll(attention_rows(q, k, v, 2, causal=True), t)
        tape.backward(loss)

        def f(kv):
            out, _ = cross_entropy_nll(
                attention_rows(q, Tensor2(kv), v, 2, causal=True), t
            )
            return float(out.data[0, 0])

        fd = finite_diff_grad(f, k0, 1e-6)
        assert np.allclose(tape.grad(k), fd, atol=1e-7)

    def test_masked_row_add(self):
        x0 = self.rng.normal(size=(4, 3))
        base = Tensor2(self.rng.normal(size=(4, 3)))
        t = self.rng.integers(0, 3, size=4)
        rows = np.array([1, 3])
        _op_grad_check(
            lambda x: cross_entropy_nll(masked_row_add(base, x, rows), t)[0], x0
        )

    def test_embed_rows(self):
        tbl0 = self.rng.normal(size=(5, 4))
        ids = np.array([0, 2, 2, 4])
        t = self.rng.integers(0, 4, size=4)
        _op_grad_check(lambda x: cross_entropy_nll(embed_rows(x, ids), t)[0], tbl0)


class TestAttentionRows:
    def test_single_head_matches_reference(self):
        """heads=1 equals the explicit single-matrix softmax(QK^T/sqrt(d))V."""
        rng = np.random.default_rng(11)
        q = rng.normal(size=(6, 8)).astype(np.float32)
        k = rng.normal(size=(5, 8)).astype(np.float32)
        v = rng.normal(size=(5, 8)).astype(np.float32)
        got = attention_rows(Tensor2(q), Tensor2(k), Tensor2(v), heads=1).data
        ref = softmax_rows(
            scale(matmul(Tensor2(q), transpose(Tensor2(k))), 1 / np.sqrt(8))
        )
        want = matmul(ref, Tensor2(v)).data
        assert np.allclose(got, want, atol=1e-5)

    def test_causal_blocks_future(self):
        rng = np.random.default_rng(12)
        q = rng.normal(size=(4, 4)).astype(np.float32)
        k = rng.normal(size=(4, 4)).astype(np.float32)
        v1 = rng.normal(size=(4, 4)).astype(np.float32)
        out1 = attention_rows(Tensor2(q), Tensor2(k), Tensor2(v1), 1, causal=True).data
        v2 = v1.copy()
        v2[3] += 100.0  # future row must not affect earlier outputs
        out2 = attention_rows(Tensor2(q), Tensor2(k), Tensor2(v2), 1, causal=True).data
        assert np.allclose(out1[:3], out2[:3], atol=1e-6)
        assert not np.allclose(out1[3], out2[3])


class TestMaskedRowAdd:
    def test_untouched_rows_bit_identical(self):
        rng = np.random.default_rng(13)
        base = rng.normal(size=(5, 4)).astype(np.float32)
        delta = rng.normal(size=(5, 4)).astype(np.float32)
        out = masked_row_add(Tensor2(base), Tensor2(delta), [1, 2]).data
        assert out[[0, 3, 4]].tobytes() == base[[0, 3, 4]].tobytes()
        assert np.allclose(out[[1, 2]], base[[1, 2]] + delta[[1, 2]])
