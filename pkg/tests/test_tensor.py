"""Core tensor library: shapes, kernels vs brute-force oracles, autodiff."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refalign.errors import NumericError, ShapeError
from refalign.rng import Rng
from refalign.tensor import (
    Tensor,
    concat,
    conv2d,
    depth_to_space,
    group_norm,
    layer_norm,
    matmul,
    no_grad,
    reshape,
    silu,
    softmax,
    softmax_rows,
    space_to_depth,
    transpose,
    upsample_nearest,
)

from conftest import rel_err


def conv_loop_oracle(x, w, stride, pad):
    """Element-wise triple-loop convolution in float64."""
    x = x.astype(np.float64)
    w = w.astype(np.float64)
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (xp.shape[2] - kh) // stride + 1
    ow = (xp.shape[3] - kw) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for b in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    win = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = (win * w[o]).sum()
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2, dtype=np.float32))
        b = Tensor(np.array([[3, 4], [5, 6]], np.float32))
        assert np.array_equal(matmul(a, b).data, b.data)

    def test_identity_bitwise_random(self, rng):
        a = Tensor(rng.normal((7, 7)))
        eye = Tensor(np.eye(7, dtype=np.float32))
        assert np.array_equal(matmul(eye, a).data, a.data)

    def test_hand_checked(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_against_triple_loop(self, rng):
        a = rng.normal((5, 7))
        b = rng.normal((7, 3))
        want = np.zeros((5, 3), np.float64)
        for i in range(5):
            for j in range(3):
                for k in range(7):
                    want[i, j] += float(a[i, k]) * float(b[k, j])
        got = matmul(Tensor(a), Tensor(b)).data
        assert np.abs(got - want).max() < 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_batched_matches_per_item(self, rng):
        a = rng.normal((4, 3, 5))
        b = rng.normal((4, 5, 2))
        got = matmul(Tensor(a), Tensor(b)).data
        for i in range(4):
            assert np.allclose(got[i], a[i] @ b[i], atol=1e-6)

    def test_grad(self, rng):
        a = Tensor(rng.normal((3, 4)), requires_grad=True)
        b = Tensor(rng.normal((4, 2)), requires_grad=True)
        (matmul(a, b) ** 2).sum().backward()
        y = a.data @ b.data
        assert np.allclose(a.grad, 2 * y @ b.data.T, atol=1e-5)
        assert np.allclose(b.grad, 2 * a.data.T @ y, atol=1e-5)


class TestSoftmax:
    def test_uniform_logits(self):
        out = softmax_rows(Tensor(np.zeros((1, 4), np.float32)))
        assert np.allclose(out.data, 0.25)

    def test_max_subtraction_stability(self):
        out = softmax_rows(Tensor(np.array([[1000.0, 0.0]], np.float32)))
        assert np.isfinite(out.data).all()
        assert out.data[0, 0] == pytest.approx(1.0)
        assert out.data[0, 1] == pytest.approx(0.0, abs=1e-40)

    def test_random_rows_sum_to_one(self, rng):
        out = softmax_rows(Tensor(rng.normal((4, 6)) * 3))
        assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-6

    @settings(max_examples=40, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        rows=st.integers(1, 8),
        cols=st.integers(1, 12),
        scale=st.floats(0.1, 50.0),
    )
    def test_property_rows_sum_to_one(self, seed, rows, cols, scale):
        x = Rng(seed).normal((rows, cols)) * np.float32(scale)
        out = softmax_rows(Tensor(x))
        assert np.all(out.data >= 0)
        assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-5

    def test_non_finite_input_rejected(self):
        bad = np.array([[1.0, np.inf]], np.float32)
        with pytest.raises(NumericError):
            softmax_rows(Tensor(bad))

    def test_requires_2d(self):
        with pytest.raises(ShapeError):
            softmax_rows(Tensor(np.zeros(3)))


class TestConv:
    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
    def test_forward_matches_loop_oracle(self, rng, stride, pad):
        x = rng.normal((2, 3, 6, 6))
        w = rng.normal((4, 3, 3, 3)) * 0.4
        got = conv2d(Tensor(x), Tensor(w), None, stride=stride, padding=pad).data
        want = conv_loop_oracle(x, w, stride, pad)
        assert np.abs(got - want).max() < 1e-5

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1)])
    def test_grads_match_fd_on_oracle(self, rng, stride, pad):
        x = rng.normal((1, 2, 4, 4)).astype(np.float64)
        w = (rng.normal((3, 2, 3, 3)) * 0.4).astype(np.float64)
        xt = Tensor(x, requires_grad=True)
        wt = Tensor(w, requires_grad=True)
        (conv2d(xt, wt, None, stride=stride, padding=pad) ** 2).sum().backward()
        eps = 1e-5
        for probe, grad, fn in (
            (x, xt.grad, lambda v: (conv_loop_oracle(v, w, stride, pad) ** 2).sum()),
            (w, wt.grad, lambda v: (conv_loop_oracle(x, v, stride, pad) ** 2).sum()),
        ):
            fd = np.zeros(probe.size)
            flat = probe.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = fn(probe)
                flat[i] = orig - eps
                lo = fn(probe)
                flat[i] = orig
                fd[i] = (hi - lo) / (2 * eps)
            assert rel_err(grad, fd.reshape(probe.shape)) < 1e-3

    def test_bias_and_channel_mismatch(self, rng):
        x = Tensor(rng.normal((1, 3, 4, 4)))
        w = Tensor(rng.normal((2, 4, 3, 3)))
        with pytest.raises(ShapeError):
            conv2d(x, w, None, padding=1)


class TestNorms:
    def test_group_norm_statistics(self, rng):
        x = rng.normal((2, 8, 5, 5)) * 3 + 1
        out = group_norm(Tensor(x), 4, Tensor(np.ones(8, np.float32)), Tensor(np.zeros(8, np.float32))).data
        grouped = out.reshape(2, 4, -1)
        assert np.abs(grouped.mean(axis=2)).max() < 1e-5
        assert np.abs(grouped.std(axis=2) - 1.0).max() < 1e-3

    def test_group_norm_grad_vs_fd(self, rng):
        x = rng.normal((2, 4, 3, 3)).astype(np.float64)
        gamma = (1 + 0.2 * rng.normal((4,))).astype(np.float64)
        beta = (0.1 * rng.normal((4,))).astype(np.float64)

        def ref(xv, gv, bv):
            xg = xv.reshape(2, 2, -1)
            mu = xg.mean(2, keepdims=True)
            var = xg.var(2, keepdims=True)
            xh = (xg - mu) / np.sqrt(var + 1e-5)
            y = xh.reshape(2, 4, 3, 3) * gv.reshape(1, 4, 1, 1) + bv.reshape(1, 4, 1, 1)
            return (y**2).sum()

        xt = Tensor(x, requires_grad=True)
        gt = Tensor(gamma, requires_grad=True)
        bt = Tensor(beta, requires_grad=True)
        (group_norm(xt, 2, gt, bt) ** 2).sum().backward()
        eps = 1e-5
        for value, grad, idxfn in (
            (x.copy(), xt.grad, lambda v: ref(v, gamma, beta)),
            (gamma.copy(), gt.grad, lambda v: ref(x, v, beta)),
            (beta.copy(), bt.grad, lambda v: ref(x, gamma, v)),
        ):
            fd = np.zeros(value.size)
            flat = value.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = idxfn(value)
                flat[i] = orig - eps
                lo = idxfn(value)
                flat[i] = orig
                fd[i] = (hi - lo) / (2 * eps)
            assert rel_err(grad, fd.reshape(value.shape)) < 1e-3

    def test_layer_norm_normalizes_rows(self, rng):
        x = rng.normal((3, 5, 16)) * 2 + 0.3
        out = layer_norm(Tensor(x), Tensor(np.ones(16, np.float32)), Tensor(np.zeros(16, np.float32))).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-5
        assert np.abs(out.std(axis=-1) - 1.0).max() < 1e-2


class TestShapeOps:
    def test_space_depth_roundtrip(self, rng):
        x = rng.normal((2, 3, 8, 8))
        out = depth_to_space(space_to_depth(Tensor(x), 2), 2).data
        assert np.array_equal(out, x)

    def test_upsample_sum_preserving_grad(self, rng):
        x = Tensor(rng.normal((1, 2, 3, 3)), requires_grad=True)
        upsample_nearest(x, 2).sum().backward()
        assert np.allclose(x.grad, 4.0)

    def test_concat_and_grad(self, rng):
        a = Tensor(rng.normal((2, 3)), requires_grad=True)
        b = Tensor(rng.normal((2, 2)), requires_grad=True)
        out = concat([a, b], axis=1)
        assert out.shape == (2, 5)
        (out * out).sum().backward()
        assert np.allclose(a.grad, 2 * a.data, atol=1e-6)
        assert np.allclose(b.grad, 2 * b.data, atol=1e-6)

    def test_concat_shape_mismatch(self):
        with pytest.raises(ShapeError):
            concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)

    def test_transpose_reshape_grads(self, rng):
        x = Tensor(rng.normal((2, 3, 4)), requires_grad=True)
        y = reshape(transpose(x, (2, 0, 1)), (4, 6))
        (y * y).sum().backward()
        assert np.allclose(x.grad, 2 * x.data, atol=1e-6)


class TestAutogradPlumb:
    def test_broadcast_add_grad(self, rng):
        x = Tensor(rng.normal((4, 3)), requires_grad=True)
        bias = Tensor(rng.normal((3,)), requires_grad=True)
        ((x + bias) ** 2).sum().backward()
        assert bias.grad.shape == (3,)
        assert np.allclose(bias.grad, (2 * (x.data + bias.data)).sum(axis=0), atol=1e-5)

    def test_shared_operand_accumulates(self, rng):
        x = Tensor(rng.normal((3,)), requires_grad=True)
        ((x + x) * x).sum().backward()  # d/dx (2x^2) = 4x
        assert np.allclose(x.grad, 4 * x.data, atol=1e-5)

    def test_silu_grad(self, rng):
        x = Tensor(rng.normal((10,)), requires_grad=True)
        silu(x).sum().backward()
        s = 1 / (1 + np.exp(-x.data.astype(np.float64)))
        assert rel_err(x.grad, s * (1 + x.data * (1 - s))) < 1e-4

    def test_backward_requires_scalar(self, rng):
        x = Tensor(rng.normal((3,)), requires_grad=True)
        with pytest.raises(ShapeError):
            (x * 2).backward()

    def test_no_grad_skips_graph(self, rng):
        x = Tensor(rng.normal((3,)), requires_grad=True)
        with no_grad():
            y = x * 2
        assert y._backward is None and not y.requires_grad

    def test_forward_determinism_bitwise(self):
        a = Rng(5).normal((64, 64))
        b = Rng(6).normal((64, 64))
        r1 = matmul(Tensor(a), Tensor(b)).data
        r2 = matmul(Tensor(a.copy()), Tensor(b.copy())).data
        assert np.array_equal(r1, r2)

    def test_finite_check_flag(self):
        big = Tensor(np.array([3e38], np.float32))
        with np.errstate(over="ignore"):
            with pytest.raises(NumericError):
                big + big
