"""Finite-difference and analytic oracles for the reverse-mode tape."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jhcodec import autodiff as ad
from jhcodec.gradcheck import check_gradients, numeric_grad, relative_error


def rand(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


class TestElementwise:
    @pytest.mark.parametrize("seed", range(5))
    def test_add_mul_broadcast(self, seed):
        rng = np.random.default_rng(seed)
        a = rand(rng, 3, 4)
        b = rand(rng, 4)

        def build(leaves):
            x, y = leaves
            return ((x + y) * (x * 0.5 + 1.0)).sum()

        check_gradients(build, [a, b], rng=rng)

    def test_div(self):
        rng = np.random.default_rng(7)
        a = rand(rng, 4, 3)
        b = rand(rng, 4, 3) + 3.0

        def build(leaves):
            x, y = leaves
            return ad.div(x, y).sum()

        check_gradients(build, [a, b], rng=rng)

    def test_sub_neg_scalar_ops(self):
        rng = np.random.default_rng(3)
        a = rand(rng, 5)

        def build(leaves):
            (x,) = leaves
            return (2.0 - (-x) / 4.0 - x * 3.0).sum()

        check_gradients(build, [a], rng=rng)

    @pytest.mark.parametrize(
        "op,shift",
        [(ad.absolute, 2.0), (ad.sqrt, 4.0), (ad.log, 4.0), (ad.exp, 0.0), (ad.silu, 0.0)],
    )
    def test_unary(self, op, shift):
        rng = np.random.default_rng(11)
        a = rand(rng, 3, 5) * 0.5 + shift

        def build(leaves):
            return op(leaves[0]).sum()

        check_gradients(build, [a], rng=rng)

    def test_abs_sign_at_known_points(self):
        x = ad.Tensor(np.array([-2.0, 3.0, -0.5], dtype=np.float32), requires_grad=True)
        ad.absolute(x).sum().backward()
        np.testing.assert_array_equal(x.grad, np.array([-1.0, 1.0, -1.0], dtype=np.float32))


class TestMatmulAndShape:
    @pytest.mark.parametrize("seed", range(5))
    def test_matmul_2d(self, seed):
        rng = np.random.default_rng(seed + 100)
        a = rand(rng, 3, 4)
        b = rand(rng, 4, 2)

        def build(leaves):
            return ad.matmul(leaves[0], leaves[1]).sum()

        check_gradients(build, [a, b], rng=rng)

    def test_matmul_batched_against_broadcast_weight(self):
        rng = np.random.default_rng(5)
        a = rand(rng, 2, 3, 4)
        w = rand(rng, 4, 5)

        def build(leaves):
            y = ad.matmul(leaves[0], leaves[1])
            return (y * y).sum()

        check_gradients(build, [a, w], rng=rng)

    def test_matmul_rejects_vectors(self):
        with pytest.raises(ValueError):
            ad.matmul(ad.Tensor(np.ones(3)), ad.Tensor(np.ones((3, 2))))

    def test_reshape_swap_narrow_concat(self):
        rng = np.random.default_rng(9)
        a = rand(rng, 2, 6)
        b = rand(rng, 2, 3)

        def build(leaves):
            x, y = leaves
            x2 = ad.reshape(x, (2, 2, 3))
            x2 = ad.swap_axes(x2, -1, -2)
            piece = x2[:, 1:, :]
            flat = ad.reshape(piece, (2, -1))
            joined = ad.concat([flat, y], axis=-1)
            return (joined * joined).sum()

        check_gradients(build, [a, b], rng=rng)

    def test_narrow_backward_scatters_zeros_elsewhere(self):
        x = ad.Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
        x[:, :2].sum().backward()
        expected = np.array([[1, 1, 0], [1, 1, 0]], dtype=np.float32)
        np.testing.assert_array_equal(x.grad, expected)


class TestReductions:
    @pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (1, True), ((0, 2), False)])
    def test_sum(self, axis, keepdims):
        rng = np.random.default_rng(21)
        a = rand(rng, 2, 3, 4)

        def build(leaves):
            s = ad.reduce_sum(leaves[0], axis=axis, keepdims=keepdims)
            return (s * s).sum()

        check_gradients(build, [a], rng=rng)

    def test_mean_matches_sum_scaling(self):
        rng = np.random.default_rng(22)
        a = rand(rng, 3, 4)
        x1 = ad.Tensor(a, requires_grad=True)
        ad.reduce_mean(x1, axis=1).sum().backward()
        x2 = ad.Tensor(a, requires_grad=True)
        (ad.reduce_sum(x2, axis=1) * (1.0 / 4.0)).sum().backward()
        np.testing.assert_allclose(x1.grad, x2.grad, rtol=0, atol=0)


class TestNormalizers:
    def test_softmax_forward_oracle(self):
        rng = np.random.default_rng(31)
        a = rand(rng, 4, 7)
        y = ad.softmax(ad.Tensor(a)).data
        e = np.exp(a - a.max(axis=-1, keepdims=True))
        np.testing.assert_allclose(y, e / e.sum(axis=-1, keepdims=True), rtol=1e-6, atol=1e-7)
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, rtol=1e-6)

    def test_softmax_grad(self):
        rng = np.random.default_rng(32)
        a = rand(rng, 3, 6)
        w = rand(rng, 3, 6)

        def build(leaves):
            return (ad.softmax(leaves[0]) * w).sum()

        check_gradients(build, [a], rng=rng)

    def test_layer_norm_forward_statistics(self):
        rng = np.random.default_rng(33)
        a = rand(rng, 5, 16) * 3.0 + 1.0
        y = ad.layer_norm(ad.Tensor(a)).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-5)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-3)

    def test_layer_norm_grad(self):
        rng = np.random.default_rng(34)
        a = rand(rng, 4, 8)
        w = rand(rng, 4, 8)

        def build(leaves):
            return (ad.layer_norm(leaves[0]) * w).sum()

        check_gradients(build, [a], rng=rng)


class TestLookupAndFraming:
    def test_embedding_forward_and_scatter(self):
        table = ad.Tensor(np.arange(12, dtype=np.float32).reshape(4, 3), requires_grad=True)
        idx = np.array([[0, 2], [2, 2]])
        out = ad.embedding(table, idx)
        np.testing.assert_array_equal(out.data, table.data[idx])
        out.sum().backward()
        expected = np.zeros((4, 3), dtype=np.float32)
        expected[0] = 1.0
        expected[2] = 3.0
        np.testing.assert_array_equal(table.grad, expected)

    def test_embedding_grad_fd(self):
        rng = np.random.default_rng(41)
        table = rand(rng, 6, 4)
        idx = rng.integers(0, 6, size=(3, 5))
        w = rand(rng, 3, 5, 4)

        def build(leaves):
            return (ad.embedding(leaves[0], idx) * w).sum()

        check_gradients(build, [table], rng=rng)

    def test_ste_identity(self):
        rng = np.random.default_rng(42)
        x = ad.Tensor(rand(rng, 3, 4), requires_grad=True)
        q = rand(rng, 3, 4)
        out = ad.ste_quantize(x, q)
        np.testing.assert_array_equal(out.data, q)
        cotangent = rand(rng, 3, 4)
        (out * cotangent).sum().backward()
        np.testing.assert_array_equal(x.grad, cotangent)

    def test_ste_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.ste_quantize(ad.Tensor(np.ones((2, 3))), np.ones((3, 2)))

    @pytest.mark.parametrize("frame,hop", [(4, 4), (4, 2), (6, 3)])
    def test_frame_signal_forward(self, frame, hop):
        t = 16
        x = np.arange(t, dtype=np.float32)
        out = ad.frame_signal(ad.Tensor(x), frame, hop).data
        count = 1 + (t - frame) // hop
        assert out.shape == (count, frame)
        for i in range(count):
            np.testing.assert_array_equal(out[i], x[i * hop : i * hop + frame])

    def test_frame_signal_overlap_add_grad(self):
        rng = np.random.default_rng(43)
        x = rand(rng, 2, 12)
        w = rand(rng, 2, 5, 4)

        def build(leaves):
            return (ad.frame_signal(leaves[0], 4, 2) * w).sum()

        check_gradients(build, [x], rng=rng)

    def test_frame_signal_too_short(self):
        with pytest.raises(ValueError):
            ad.frame_signal(ad.Tensor(np.ones(3)), 4, 2)


class TestTapeMechanics:
    def test_no_grad_blocks_recording(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            y = (x * 2.0).sum()
        assert not y.requires_grad
        assert y._backward is None

    def test_detach_stops_gradient(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        ((x.detach() * x).sum()).backward()
        np.testing.assert_array_equal(x.grad, np.ones(3, dtype=np.float32))

    def test_backward_requires_scalar(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_grad_accumulates_across_backward_calls(self):
        x = ad.Tensor(np.ones(2), requires_grad=True)
        (x * 3.0).sum().backward()
        (x * 3.0).sum().backward()
        np.testing.assert_array_equal(x.grad, np.full(2, 6.0, dtype=np.float32))

    def test_shared_subexpression_accumulates_once_per_path(self):
        x = ad.Tensor(np.array([2.0]), requires_grad=True)
        y = x * x
        (y + y).sum().backward()
        np.testing.assert_allclose(x.grad, [8.0])

    def test_deep_chain_is_iterative(self):
        x = ad.Tensor(np.ones(1), requires_grad=True)
        y = x
        for _ in range(3000):
            y = y + 0.0
        y.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones(1, dtype=np.float32))

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(99)
            x = ad.Tensor(rng.standard_normal((8, 8)).astype(np.float32), requires_grad=True)
            w = ad.Tensor(rng.standard_normal((8, 8)).astype(np.float32), requires_grad=True)
            loss = ad.silu(ad.matmul(ad.layer_norm(x), w)).sum()
            loss.backward()
            return x.grad.tobytes(), w.grad.tobytes()

        assert run() == run()


@settings(max_examples=30, deadline=None)
@given(
    rows=st.integers(1, 4),
    cols=st.integers(1, 4),
    seed=st.integers(0, 2**16),
    broadcast_row=st.booleans(),
)
def test_add_unbroadcast_property(rows, cols, seed, broadcast_row):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((rows, cols)).astype(np.float32)
    b_shape = (1, cols) if broadcast_row else (rows, 1)
    b = rng.standard_normal(b_shape).astype(np.float32)
    x = ad.Tensor(a, requires_grad=True)
    y = ad.Tensor(b, requires_grad=True)
    (x + y).sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones_like(a))
    np.testing.assert_array_equal(y.grad, np.full(b_shape, a.size / b.size, dtype=np.float32))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_matmul_grad_property(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4)).astype(np.float32)
    b = rng.standard_normal((4, 2)).astype(np.float32)
    u = rng.standard_normal((3, 2)).astype(np.float32)
    x = ad.Tensor(a, requires_grad=True)
    w = ad.Tensor(b, requires_grad=True)
    (ad.matmul(x, w) * u).sum().backward()
    np.testing.assert_allclose(x.grad, u @ b.T, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(w.grad, a.T @ u, rtol=1e-5, atol=1e-6)


def test_numeric_grad_self_consistency():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((3, 3)).astype(np.float32)

    def fn(arrs):
        return float((arrs[0] ** 2).sum())

    g = numeric_grad(fn, [a], 0)
    assert relative_error(g, 2 * a) < 1e-3
