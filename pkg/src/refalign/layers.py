"""Parameterized building blocks shared by the encoder and the denoiser."""

from __future__ import annotations

import math

import numpy as np

from .rng import Rng
from .tensor import Module, Tensor, conv2d, group_norm, layer_norm, matmul


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True, zero_init: bool = False):
        if zero_init:
            w = np.zeros((d_in, d_out), np.float32)
        else:
            bound = 1.0 / math.sqrt(d_in)
            w = rng.uniform(-bound, bound, (d_in, d_out))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(d_out, np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.w)
        if self.b is not None:
            y = y + self.b
        return y


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: Rng,
        stride: int = 1,
        padding: int = 0,
        zero_init: bool = False,
    ):
        self.stride = stride
        self.padding = padding
        if zero_init:
            w = np.zeros((c_out, c_in, kernel, kernel), np.float32)
        else:
            bound = 1.0 / math.sqrt(c_in * kernel * kernel)
            w = rng.uniform(-bound, bound, (c_out, c_in, kernel, kernel))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(c_out, np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8):
        self.groups = min(groups, channels)
        while channels % self.groups:
            self.groups -= 1
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return group_norm(x, self.groups, self.gamma, self.beta)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


def timestep_embedding(timesteps: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (B, dim). Not differentiable."""
    t = np.asarray(timesteps, np.float32).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float32) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.shape[0], 1), np.float32)], axis=1)
    return emb.astype(np.float32)
