"""Finite-difference validation of every differentiable layer family."""

import math

import numpy as np
import pytest

from refalign.gradcheck import grad_check
from refalign.layers import Conv2d, GroupNorm, LayerNorm, Linear
from refalign.rng import Rng
from refalign.tensor import Tensor, matmul, reshape, silu, softmax, transpose, upsample_nearest


@pytest.fixture()
def grng():
    return Rng(314)


def anchored(loss_fn, shape, grng):
    """Add a +-1 linear term so no input element has a vanishing gradient;
    float32 finite differences need gradients bounded away from zero, and a
    wrong layer gradient still shifts the anchored one by its full size."""
    signs = Tensor(np.where(grng.uniform(0, 1, shape) < 0.5, -1.0, 1.0).astype(np.float32))
    return lambda x: loss_fn(x) + (x * signs).sum()


class TestGradCheckContract:
    def test_quadratic_analytic(self):
        x = Tensor(np.array([1.0, 2.0, 3.0], np.float32), requires_grad=True)
        err = grad_check(lambda t: (t * t).sum(), Tensor(np.array([1.0, 2.0, 3.0], np.float32)), eps=1e-3)
        (x * x).sum().backward()
        assert np.allclose(x.grad, [2.0, 4.0, 6.0])
        assert err < 1e-4

    def test_eps_bounds(self):
        with pytest.raises(ValueError):
            grad_check(lambda t: t.sum(), Tensor(np.ones(2)), eps=1.0)

    def test_non_scalar_rejected(self):
        from refalign.errors import ShapeError

        with pytest.raises(ShapeError):
            grad_check(lambda t: t * 2, Tensor(np.ones(3)), eps=1e-3)


class TestLayerGradients:
    """Each layer the denoiser uses stays under 1e-3 relative error."""

    def test_two_layer_perceptron_softmax_ce(self, grng):
        from refalign.tensor import log

        fc1 = Linear(8, 16, grng)
        fc2 = Linear(16, 4, grng)
        onehot = Tensor(_onehot(4, 2))

        def f(x):
            probs = softmax(fc2(silu(fc1(reshape(x, (1, 8))))), axis=-1)
            return -log((probs * onehot).sum())

        assert grad_check(f, Tensor(grng.normal((8,))), eps=1e-2) < 1e-3

    def test_cross_attention_block(self, grng):
        # q from a 4x4 grid, k/v from 9 tokens; damped logits keep every
        # attention row soft so no gradient element vanishes into FD noise
        wq = Linear(6, 8, grng)
        wk = Linear(5, 8, grng)
        wv = Linear(5, 8, grng)
        tokens = Tensor(grng.normal((9, 5)) * 0.5)
        probe = Tensor(grng.normal((16, 8)))

        def f(x):
            q = wq(reshape(x, (16, 6)))
            k = wk(tokens)
            v = wv(tokens)
            attn = softmax(matmul(q, transpose(k, (1, 0))) * (0.3 / math.sqrt(8)), axis=-1)
            return (matmul(attn, v) * probe).sum()

        f_anchored = anchored(f, (16, 6), grng)
        assert grad_check(f_anchored, Tensor(grng.normal((16, 6)) * 0.5), eps=1e-2) < 1e-3

    def test_conv_stride1(self, grng):
        conv = Conv2d(2, 3, 3, grng, padding=1)
        probe = Tensor(grng.normal((1, 3, 4, 4)))
        f = anchored(lambda x: (conv(reshape(x, (1, 2, 4, 4))) * probe).sum(), (2, 4, 4), grng)
        assert grad_check(f, Tensor(grng.normal((2, 4, 4))), eps=1e-2) < 1e-3

    def test_conv_stride2(self, grng):
        conv = Conv2d(2, 3, 3, grng, stride=2, padding=1)
        probe = Tensor(grng.normal((1, 3, 2, 2)))
        f = anchored(lambda x: (conv(reshape(x, (1, 2, 4, 4))) * probe).sum(), (2, 4, 4), grng)
        assert grad_check(f, Tensor(grng.normal((2, 4, 4))), eps=1e-2) < 1e-3

    def test_group_norm(self, grng):
        # random affine + probe keep the loss sensitive to the statistics
        gn = GroupNorm(4, 2)
        gn.gamma.data[:] = 1.0 + 0.3 * grng.normal((4,))
        gn.beta.data[:] = 0.2 * grng.normal((4,))
        probe = Tensor(grng.normal((1, 4, 3, 3)))
        f = anchored(lambda x: (gn(reshape(x, (1, 4, 3, 3))) * probe).sum(), (4, 3, 3), grng)
        assert grad_check(f, Tensor(grng.normal((4, 3, 3))), eps=1e-2) < 1e-3

    def test_layer_norm(self, grng):
        ln = LayerNorm(6)
        ln.gamma.data[:] = 1.0 + 0.3 * grng.normal((6,))
        ln.beta.data[:] = 0.2 * grng.normal((6,))
        probe = Tensor(grng.normal((2, 6)))
        f = lambda x: (ln(reshape(x, (2, 6))) * probe).sum()
        assert grad_check(f, Tensor(grng.normal((2, 6))), eps=1e-2) < 1e-3

    def test_silu(self, grng):
        assert grad_check(lambda x: silu(x).sum(), Tensor(grng.normal((12,))), eps=1e-2) < 1e-3

    def test_upsample(self, grng):
        probe = Tensor(grng.normal((1, 2, 6, 6)))
        f = lambda x: (upsample_nearest(reshape(x, (1, 2, 3, 3)), 2) * probe).sum()
        assert grad_check(f, Tensor(grng.normal((2, 3, 3))), eps=1e-2) < 1e-3

    def test_matmul_chain(self, grng):
        w = Tensor(grng.normal((6, 4)))
        probe = Tensor(grng.normal((3, 4)))
        f = lambda x: (matmul(reshape(x, (3, 6)), w) * probe).sum()
        assert grad_check(f, Tensor(grng.normal((3, 6))), eps=1e-2) < 1e-3


def _onehot(n, idx):
    v = np.zeros((1, n), np.float32)
    v[0, idx] = 1.0
    return v
