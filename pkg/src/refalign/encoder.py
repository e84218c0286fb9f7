"""Vision encoder producing spatially-indexed reference tokens.

A small ViT: learned linear patch embedding plus 2D positional embedding,
a stack of pre-norm self-attention blocks, and a residual adapter MLP that
produces the tokens consumed by the denoiser's cross-attention. Token k of
an (g_h, g_w) grid corresponds to grid cell (k // g_w, k % g_w).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .layers import LayerNorm, Linear
from .rng import Rng
from .tensor import Module, Tensor, matmul, reshape, silu, softmax, transpose


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    d_tok: int = 128
    n_layers: int = 2
    n_heads: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise DataError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d_tok % self.n_heads:
            raise DataError("d_tok must be divisible by n_heads")

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return (g, g)

    @property
    def n_tokens(self) -> int:
        g_h, g_w = self.grid
        return g_h * g_w


@dataclass
class ReferenceTokens:
    """Encoder output: an (N_tok, d_tok) token matrix with its 2D grid layout."""

    tokens: Tensor
    grid: tuple[int, int]
    patch_size: int

    def __post_init__(self):
        g_h, g_w = self.grid
        if self.tokens.shape[-2] != g_h * g_w:
            raise ShapeError(f"token count {self.tokens.shape} != grid {self.grid}")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[-2]

    @property
    def d_tok(self) -> int:
        return self.tokens.shape[-1]

    def cell_of(self, k: int) -> tuple[int, int]:
        return (k // self.grid[1], k % self.grid[1])


class SelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: Rng):
        self.heads = heads
        self.dim_head = dim // heads
        self.norm = LayerNorm(dim)
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h, dh = self.heads, self.dim_head
        y = self.norm(x)
        q = transpose(reshape(self.wq(y), (b, n, h, dh)), (0, 2, 1, 3))
        k = transpose(reshape(self.wk(y), (b, n, h, dh)), (0, 2, 1, 3))
        v = transpose(reshape(self.wv(y), (b, n, h, dh)), (0, 2, 1, 3))
        logits = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        attn = softmax(logits, axis=-1)
        out = matmul(attn, v)
        out = reshape(transpose(out, (0, 2, 1, 3)), (b, n, d))
        return x + self.wo(out)


class FeedForward(Module):
    def __init__(self, dim: int, rng: Rng, expand: int = 4):
        self.norm = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * expand, rng)
        self.fc2 = Linear(dim * expand, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.fc2(silu(self.fc1(self.norm(x))))


class VisionEncoder(Module):
    """phi: image -> token sequence, plus the adapter MLP and the null token."""

    def __init__(self, cfg: EncoderConfig, rng: Rng):
        self.cfg = cfg
        d = cfg.d_tok
        patch_dim = cfg.patch_size * cfg.patch_size * 3
        self.patch_embed = Linear(patch_dim, d, rng)
        self.pos_embed = Tensor(rng.normal((cfg.n_tokens, d), scale=0.02), requires_grad=True)
        self.blocks = []
        for _ in range(cfg.n_layers):
            self.blocks.append(SelfAttention(d, cfg.n_heads, rng))
            self.blocks.append(FeedForward(d, rng))
        self.final_norm = LayerNorm(d)
        self.adapter_fc1 = Linear(d, 2 * d, rng)
        self.adapter_fc2 = Linear(2 * d, d, rng)
        self.null_token = Tensor(rng.normal((d,), scale=0.02), requires_grad=True)

    def _patchify(self, images: np.ndarray) -> np.ndarray:
        b = images.shape[0]
        s, p = self.cfg.image_size, self.cfg.patch_size
        g = s // p
        x = images.reshape(b, g, p, g, p, 3).transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(x).reshape(b, g * g, p * p * 3)

    def encode_batch(self, images: np.ndarray) -> Tensor:
        """Encode a (B, S, S, 3) float batch in [0, 1] to (B, N_tok, d_tok) tokens."""
        if images.ndim != 4 or images.shape[1:] != (self.cfg.image_size, self.cfg.image_size, 3):
            raise DataError(
                f"encoder expects (B, {self.cfg.image_size}, {self.cfg.image_size}, 3), got {images.shape}"
            )
        patches = Tensor(self._patchify(images.astype(np.float32) * 2.0 - 1.0))
        x = self.patch_embed(patches) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.final_norm(x)
        return x + self.adapter_fc2(silu(self.adapter_fc1(x)))

    def encode_reference(self, image: np.ndarray) -> ReferenceTokens:
        """Encode a single (S, S, 3) image in [0, 1]."""
        if image.ndim != 3:
            raise DataError(f"encode_reference expects an HWC image, got {image.shape}")
        if image.shape[0] != image.shape[1] or image.shape[0] != self.cfg.image_size:
            raise DataError(
                f"reference must be square {self.cfg.image_size}px, got {image.shape}; resize first"
            )
        tokens = self.encode_batch(image[None])
        return ReferenceTokens(reshape(tokens, tokens.shape[1:]), self.cfg.grid, self.cfg.patch_size)

    def null_tokens(self, batch: int = 1) -> Tensor:
        """Token matrix used when conditioning is dropped: every slot is the null token."""
        n, d = self.cfg.n_tokens, self.cfg.d_tok
        ones = Tensor(np.ones((batch, n, 1), np.float32))
        return reshape(self.null_token, (1, 1, d)) * ones


def mask_tokens(tokens: ReferenceTokens, region: np.ndarray, null_token: Tensor) -> ReferenceTokens:
    """Replace tokens outside ``region`` (a bool grid) with the null token.

    This is the token-level fast path; the pixel-space path re-encodes the
    masked reference instead.
    """
    g_h, g_w = tokens.grid
    if region.shape != (g_h, g_w):
        raise ShapeError(f"region shape {region.shape} != token grid {(g_h, g_w)}")
    keep = Tensor(region.astype(np.float32).reshape(g_h * g_w, 1))
    null_row = reshape(null_token, (1, tokens.d_tok))
    mixed = tokens.tokens * keep + null_row * (1.0 - keep)
    return ReferenceTokens(mixed, tokens.grid, tokens.patch_size)
