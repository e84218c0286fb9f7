"""A small float32 tensor library with reverse-mode autodiff.

Design notes:
  * element storage is a row-major ``numpy.float32`` array,
  * every op validates operand shapes up front and raises ``ShapeError``
    instead of relying on silent broadcasting surprises,
  * the autograd graph is built only while gradients are enabled (see
    ``no_grad``) and only for tensors that require them,
  * heavyweight kernels (conv2d, softmax, normalization statistics) carry
    fused backward closures; everything else composes from primitives.

Forward ops are deterministic: same inputs produce bit-identical outputs
when BLAS runs with a fixed thread count.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_grad_enabled = True
_finite_checks = False


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_finite_checks(enabled: bool) -> None:
    """Verify every op output is finite (slow; meant for tests/debugging)."""
    global _finite_checks
    _finite_checks = bool(enabled)


def _as_f32(value) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A dense float32 value node, optionally tracking a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    # -- graph plumbing ------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        # Adopts g without copying: backward closures must never hand the
        # same writable buffer to two different parents (see `add`).
        if self.grad is None:
            self.grad = g if g.dtype == np.float32 else g.astype(np.float32)
        else:
            self.grad = self.grad + g if self.grad.base is not None else self.grad.__iadd__(g)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            # release the closure promptly; graphs are single-use
            node._backward = None
            node._parents = ()

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, _wrap(1.0 / other))
        return mul(self, pow_scalar(_wrap(other), -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return pow_scalar(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Create an op output, attaching the graph edge when it matters."""
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NumericError("op produced non-finite values")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            gb = _unbroadcast(g, b.shape)
            if gb is g and a.requires_grad:  # never adopt one buffer twice
                gb = g.copy()
            b._accumulate(gb)

    return _node(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _node(-a.data, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward)


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    out_data = a.data ** np.float32(exponent)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.float32(exponent) * a.data ** np.float32(exponent - 1.0))

    return _node(out_data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _node(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _node(np.log(a.data), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return _node(out_data.astype(np.float32), (a,), backward)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), the activation used throughout the models."""
    s = 1.0 / (1.0 + np.exp(-a.data))
    out_data = (a.data * s).astype(np.float32)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (s * (1.0 + a.data * (1.0 - s))).astype(np.float32))

    return _node(out_data, (a,), backward)


# -- shape ops -------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old_shape = a.shape
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old_shape} to {shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old_shape))

    return _node(out_data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for ndim {a.ndim}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inverse))

    return _node(a.data.transpose(axes), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base):
            raise ShapeError("concat rank mismatch")
        for d, (x, y) in enumerate(zip(base, other)):
            if d != (axis % len(base)) and x != y:
                raise ShapeError(f"concat shapes differ outside axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(int(lo), int(hi))
                t._accumulate(g[tuple(index)])

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# -- reductions -------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            gb = g if keepdims else np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(gb, a.shape).astype(np.float32))

    return _node(out_data, (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = float(np.prod([a.shape[i] for i in axes])) if axes else 1.0
    out_data = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if a.requires_grad:
            gb = g if keepdims else np.expand_dims(g, axes)
            a._accumulate((np.broadcast_to(gb, a.shape) / np.float32(count)).astype(np.float32))

    return _node(out_data, (a,), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports 2D x 2D, ND x 2D (a linear map over trailing dim), and stacked
    ND x ND with identical leading dims.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.ndim == b.ndim == 2:

        def backward2(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return _node(a.data @ b.data, (a, b), backward2)

    if b.ndim == 2:
        lead = a.shape[:-1]
        flat = a.data.reshape(-1, a.shape[-1])
        out_data = (flat @ b.data).reshape(*lead, b.shape[-1])

        def backward_nd2(g):
            gf = g.reshape(-1, b.shape[-1])
            if a.requires_grad:
                a._accumulate((gf @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b._accumulate(flat.T @ gf)

        return _node(out_data, (a, b), backward_nd2)

    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")

    def backward_nd(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, b.data.swapaxes(-1, -2)))
        if b.requires_grad:
            b._accumulate(np.matmul(a.data.swapaxes(-1, -2), g))

    return _node(np.matmul(a.data, b.data), (a, b), backward_nd)


def softmax(a: Tensor, axis: int = -1, order_invariant: bool = False) -> Tensor:
    """Numerically stable softmax (max subtraction) along ``axis``.

    With ``order_invariant`` the normalizer is summed over sorted float64
    terms, so permuting entries along ``axis`` permutes the output
    bit-exactly (used when recording attention); costlier, keep off on
    batched training paths.
    """
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input contains non-finite values")
    if order_invariant:
        shifted = a.data.astype(np.float64) - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        denom = np.sort(e, axis=axis).sum(axis=axis, keepdims=True)
        out_data = (e / denom).astype(np.float32)
    else:
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate((out_data * (g - dot)).astype(np.float32))

    return _node(out_data.astype(np.float32), (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Row softmax of a 2D tensor; each output row sums to one."""
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows expects 2D input, got {a.shape}")
    return softmax(a, axis=-1)


# -- convolution -------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * kh * kw)
    return np.ascontiguousarray(col), oh, ow


def _col2im(gcol: np.ndarray, padded_shape, kh: int, kw: int, stride: int, oh: int, ow: int):
    """Scatter-add column gradients back onto the padded input layout."""
    n, c, hp, wp = padded_shape
    gx = np.zeros(padded_shape, np.float32)
    gcol = gcol.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcol[:, :, i, j]
    return gx


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution over NCHW input; weight is (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input/weight, got {x.shape}, {w.shape}")
    n, c, h, wdt = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, weight {ci}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d supports stride 1 or 2, got {stride}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError("conv2d kernel larger than padded input")
    col, oh, ow = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(co, ci * kh * kw)
    out_flat = col @ wmat.T
    if b is not None:
        if b.shape != (co,):
            raise ShapeError(f"conv2d bias shape {b.shape} != ({co},)")
        out_flat = out_flat + b.data
    out_data = out_flat.reshape(n, oh, ow, co).transpose(0, 3, 1, 2)
    padded_shape = xp.shape

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n, oh * ow, co)
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=(0, 1)))
        if w.requires_grad:
            gw = g2.reshape(n * oh * ow, co).T @ col.reshape(n * oh * ow, ci * kh * kw)
            w._accumulate(gw.reshape(w.shape))
        if x.requires_grad:
            gcol = g2 @ wmat
            gx = _col2im(gcol, padded_shape, kh, kw, stride, oh, ow)
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
            x._accumulate(np.ascontiguousarray(gx))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out_data, parents, backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour spatial upsample of an NCHW tensor."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest expects 4D input, got {x.shape}")
    out_data = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        if x.requires_grad:
            n, c, h, w = x.shape
            gview = g.reshape(n, c, h, factor, w, factor)
            x._accumulate(gview.sum(axis=(3, 5)))

    return _node(out_data, (x,), backward)


def space_to_depth(x: Tensor, factor: int) -> Tensor:
    """Fold factor x factor spatial blocks into channels (exact inverse of depth_to_space)."""
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"space_to_depth: {h}x{w} not divisible by {factor}")
    t = reshape(x, (n, c, h // factor, factor, w // factor, factor))
    t = transpose(t, (0, 1, 3, 5, 2, 4))
    return reshape(t, (n, c * factor * factor, h // factor, w // factor))


def depth_to_space(x: Tensor, factor: int) -> Tensor:
    n, c, h, w = x.shape
    if c % (factor * factor):
        raise ShapeError(f"depth_to_space: {c} channels not divisible by {factor}^2")
    co = c // (factor * factor)
    t = reshape(x, (n, co, factor, factor, h, w))
    t = transpose(t, (0, 1, 4, 2, 5, 3))
    return reshape(t, (n, co, h * factor, w * factor))


# -- normalization (composed from primitives) --------------------------------


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """GroupNorm over NCHW input with affine parameters of shape (C,).

    Fused kernel with a closed-form backward; statistics are taken per
    (sample, group) over the group's channels and all spatial positions.
    """
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("group_norm affine params must have shape (C,)")
    cg = c // groups
    xg = x.data.reshape(n, groups, cg * h * w)
    mu = xg.mean(axis=2, keepdims=True)
    xm = xg - mu
    var = np.mean(xm * xm, axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = (xm * inv).astype(np.float32)
    gview = gamma.data.reshape(1, c, 1, 1)
    out_data = xhat.reshape(n, c, h, w) * gview + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat.reshape(n, c, h, w)).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = (g * gview).reshape(n, groups, cg * h * w)
            m1 = dxhat.mean(axis=2, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=2, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
            x._accumulate(gx.reshape(n, c, h, w).astype(np.float32))

    return _node(out_data.astype(np.float32), (x, gamma, beta), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """LayerNorm over the trailing feature dimension."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm affine params must match trailing dim")
    mu = x.mean(axis=-1, keepdims=True)
    xm = x - mu
    var = mul(xm, xm).mean(axis=-1, keepdims=True)
    xhat = mul(xm, pow_scalar(var + Tensor(np.float32(eps)), -0.5))
    return mul(xhat, gamma) + beta


# -- module system ------------------------------------------------------------


class Module:
    """Minimal parameter container with recursive named access."""

    def named_parameters(self, prefix: str = "") -> Iterable[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise ShapeError(f"state dict mismatch: missing={sorted(missing)}, unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = _as_f32(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"param {name}: stored shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())
