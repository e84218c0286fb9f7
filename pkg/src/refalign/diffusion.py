"""Denoising diffusion core: schedule, conditional U-Net, attention recording.

The denoiser predicts the noise added to a target image, conditioned on
(a) a channel-concatenated masked artifact image + mask and (b) reference
tokens injected through cross-attention at the configured feature
resolutions. Cross-attention maps can be recorded per (timestep, block)
for the alignment stage.

Images cross this module in model space [-1, 1]; the data pipeline works
in [0, 1]. ``to_model_space``/``to_unit_range`` convert.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import ReferenceTokens
from .errors import ModelError, NumericError, ShapeError
from .layers import Conv2d, GroupNorm, Linear, timestep_embedding
from .rng import Rng
from .tensor import (
    Module,
    Tensor,
    concat,
    depth_to_space,
    matmul,
    no_grad,
    reshape,
    silu,
    softmax,
    space_to_depth,
    transpose,
    upsample_nearest,
)


def to_model_space(img01: np.ndarray) -> np.ndarray:
    return img01.astype(np.float32) * 2.0 - 1.0


def to_unit_range(img: np.ndarray) -> np.ndarray:
    return np.clip((img.astype(np.float32) + 1.0) * 0.5, 0.0, 1.0)


def build_cond_image(image01: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked conditioning image: hole filled with mid-gray, in [0, 1]."""
    m = mask.astype(np.float32)[..., None]
    return image01.astype(np.float32) * (1.0 - m) + 0.5 * m


# -- schedule -----------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, np.float32)
        if betas.shape != (self.T,):
            raise ShapeError(f"betas shape {betas.shape} != ({self.T},)")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise NumericError("betas must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas).astype(np.float32)
        if np.any(np.diff(alpha_bars) >= 0.0):
            raise NumericError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas.astype(np.float32))
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @classmethod
    def linear(cls, T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        return cls(T=T, betas=np.linspace(beta_start, beta_end, T, dtype=np.float32))


def forward_diffuse(x0: np.ndarray, t, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise. ``t`` may be per-sample."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= sched.T):
        raise ShapeError(f"timestep {t} outside [0, {sched.T})")
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    ab = sched.alpha_bars[t_arr].astype(np.float32)
    if t_arr.ndim:  # per-sample t on a batched leading axis
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0.astype(np.float32) + np.sqrt(1.0 - ab) * noise.astype(np.float32)


# -- attention recording -------------------------------------------------------


@dataclass
class AttentionRecord:
    """Cross-attention map of one block at one timestep; rows sum to one."""

    t: int
    l: int
    d: int
    A: np.ndarray  # (d*d, N_tok), heads averaged
    heads_averaged: bool = True


class AttentionRecorder:
    """Collects per-block maps during a forward pass (single-sample only)."""

    def __init__(self):
        self.records: list[AttentionRecord] = []
        self.current_t: int = 0

    def emit(self, l: int, d: int, attn_mean: np.ndarray) -> None:
        self.records.append(AttentionRecord(t=self.current_t, l=l, d=d, A=attn_mean))


# -- configuration --------------------------------------------------------------


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 64
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 3)
    xattn_levels: tuple[int, ...] = (16, 8)
    d_tok: int = 128
    n_heads: int = 4
    t_dim: int = 128
    groups: int = 8
    cond_channels: int = 4  # 3 masked-image channels + 1 mask channel
    stem_factor: int = 2

    @property
    def level_resolutions(self) -> tuple[int, ...]:
        r0 = self.image_size // self.stem_factor
        return tuple(r0 // (2**i) for i in range(len(self.channel_mults)))

    @property
    def level_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mults)

    @property
    def n_xattn_blocks(self) -> int:
        per_side = sum(1 for r in self.level_resolutions if r in self.xattn_levels)
        middle = 1 if self.level_resolutions[-1] in self.xattn_levels else 0
        return 2 * per_side + middle


@dataclass
class DenoiserInput:
    """Single-sample denoiser inputs; images are HWC in model/unit spaces."""

    z_t: np.ndarray  # (S, S, 3) model space
    cond_image: np.ndarray  # (S, S, 3) unit range, hole already filled
    cond_mask: np.ndarray  # (S, S) in {0, 1}
    t: int
    tokens: ReferenceTokens

    def __post_init__(self):
        s = self.z_t.shape[0]
        if self.z_t.shape != (s, s, 3) or self.cond_image.shape != (s, s, 3):
            raise ShapeError("z_t and cond_image must be square HWC images of equal size")
        if self.cond_mask.shape != (s, s):
            raise ShapeError(f"cond_mask shape {self.cond_mask.shape} != ({s}, {s})")


# -- network blocks --------------------------------------------------------------


class ResBlock(Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int, groups: int, rng: Rng):
        self.norm1 = GroupNorm(c_in, groups)
        self.conv1 = Conv2d(c_in, c_out, 3, rng, padding=1)
        self.t_scale = Linear(t_dim, c_out, rng, zero_init=True)
        self.t_shift = Linear(t_dim, c_out, rng, zero_init=True)
        self.norm2 = GroupNorm(c_out, groups)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, padding=1, zero_init=True)
        self.skip = Conv2d(c_in, c_out, 1, rng) if c_in != c_out else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        b = x.shape[0]
        h = self.conv1(silu(self.norm1(x)))
        c_out = h.shape[1]
        scale = reshape(self.t_scale(temb), (b, c_out, 1, 1))
        shift = reshape(self.t_shift(temb), (b, c_out, 1, 1))
        h = self.norm2(h) * (scale + 1.0) + shift
        h = self.conv2(silu(h))
        return h + (self.skip(x) if self.skip is not None else x)


class CrossAttentionBlock(Module):
    """Multi-head cross-attention from spatial features to reference tokens."""

    def __init__(self, channels: int, d_tok: int, heads: int, groups: int, rng: Rng, index: int):
        self.index = index
        self.heads = heads
        self.dim_head = channels // heads
        if channels % heads:
            raise ShapeError(f"channels {channels} not divisible by heads {heads}")
        self.norm = GroupNorm(channels, groups)
        self.wq = Linear(channels, channels, rng, bias=False)
        self.wk = Linear(d_tok, channels, rng, bias=False)
        self.wv = Linear(d_tok, channels, rng, bias=False)
        self.wo = Linear(channels, channels, rng, zero_init=True)

    def __call__(self, x: Tensor, tokens: Tensor, recorder: AttentionRecorder | None = None) -> Tensor:
        b, c, hgt, wdt = x.shape
        n = tokens.shape[-2]
        h, dh = self.heads, self.dim_head
        y = self.norm(x)
        y = transpose(reshape(y, (b, c, hgt * wdt)), (0, 2, 1))  # (b, HW, c)
        q = transpose(reshape(self.wq(y), (b, hgt * wdt, h, dh)), (0, 2, 1, 3))
        k = transpose(reshape(self.wk(tokens), (b, n, h, dh)), (0, 2, 1, 3))
        v = transpose(reshape(self.wv(tokens), (b, n, h, dh)), (0, 2, 1, 3))
        logits = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        # single-sample path: order-invariant normalizer makes recorded maps
        # exactly equivariant under token permutation
        attn = softmax(logits, axis=-1, order_invariant=(b == 1))  # (b, h, HW, n)
        if recorder is not None:
            if b != 1:
                raise ShapeError("attention recording requires batch size 1")
            if hgt != wdt:
                raise ShapeError("attention recording requires square feature grids")
            recorder.emit(self.index, hgt, attn.data[0].mean(axis=0).astype(np.float32))
        out = matmul(attn, v)
        out = reshape(transpose(out, (0, 2, 1, 3)), (b, hgt * wdt, c))
        out = self.wo(out)
        out = reshape(transpose(out, (0, 2, 1)), (b, c, hgt, wdt))
        return x + out


class Downsample(Module):
    def __init__(self, c_in: int, c_out: int, rng: Rng):
        self.conv = Conv2d(c_in, c_out, 3, rng, stride=2, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(Module):
    """Channel-reduction conv at the coarse grid, then nearest 2x upsample."""

    def __init__(self, c_in: int, c_out: int, rng: Rng):
        self.conv = Conv2d(c_in, c_out, 3, rng, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        return upsample_nearest(self.conv(x), 2)


class UNet(Module):
    """Conditional noise predictor with cross-attention at selected levels.

    Cross-attention blocks are indexed l = 0..L-1 in forward execution
    order: down path, middle, then up path.
    """

    def __init__(self, cfg: DenoiserConfig, rng: Rng):
        self.cfg = cfg
        chans = cfg.level_channels
        resos = cfg.level_resolutions
        f = cfg.stem_factor
        in_ch = (3 + cfg.cond_channels) * f * f

        self.t_fc1 = Linear(cfg.t_dim, cfg.t_dim, rng)
        self.t_fc2 = Linear(cfg.t_dim, cfg.t_dim, rng)
        self.stem = Conv2d(in_ch, chans[0], 3, rng, padding=1)

        next_index = 0

        def make_attn(channels: int) -> CrossAttentionBlock:
            nonlocal next_index
            block = CrossAttentionBlock(channels, cfg.d_tok, cfg.n_heads, cfg.groups, rng, next_index)
            next_index += 1
            return block

        self.down_res = []
        self.down_attn = []
        self.downs = []
        for i, (ch, r) in enumerate(zip(chans, resos)):
            self.down_res.append(ResBlock(ch, ch, cfg.t_dim, cfg.groups, rng))
            self.down_attn.append(make_attn(ch) if r in cfg.xattn_levels else None)
            if i + 1 < len(chans):
                self.downs.append(Downsample(ch, chans[i + 1], rng))

        mid_ch = chans[-1]
        self.mid_res1 = ResBlock(mid_ch, mid_ch, cfg.t_dim, cfg.groups, rng)
        self.mid_attn = make_attn(mid_ch) if resos[-1] in cfg.xattn_levels else None
        self.mid_res2 = ResBlock(mid_ch, mid_ch, cfg.t_dim, cfg.groups, rng)

        self.up_res = []
        self.up_attn = []
        self.ups = []
        for i in reversed(range(len(chans))):
            ch, r = chans[i], resos[i]
            # additive skip connections keep up-path conv width at ch
            self.up_res.append(ResBlock(ch, ch, cfg.t_dim, cfg.groups, rng))
            self.up_attn.append(make_attn(ch) if r in cfg.xattn_levels else None)
            if i > 0:
                self.ups.append(Upsample(ch, chans[i - 1], rng))

        self.out_norm = GroupNorm(chans[0], cfg.groups)
        self.out_conv = Conv2d(chans[0], 3 * f * f, 3, rng, padding=1, zero_init=True)
        self.n_xattn_blocks = next_index

    def __call__(
        self,
        z: Tensor,
        cond_image: Tensor,
        cond_mask: Tensor,
        t: np.ndarray,
        tokens: Tensor,
        recorder: AttentionRecorder | None = None,
    ) -> Tensor:
        cfg = self.cfg
        temb = timestep_embedding(t, cfg.t_dim)
        temb = self.t_fc2(silu(self.t_fc1(Tensor(temb))))

        x = concat([z, cond_image, cond_mask], axis=1)
        x = space_to_depth(x, cfg.stem_factor)
        x = self.stem(x)

        skips = []
        for i in range(len(self.down_res)):
            x = self.down_res[i](x, temb)
            if self.down_attn[i] is not None:
                x = self.down_attn[i](x, tokens, recorder)
            skips.append(x)
            if i < len(self.downs):
                x = self.downs[i](x)

        x = self.mid_res1(x, temb)
        if self.mid_attn is not None:
            x = self.mid_attn(x, tokens, recorder)
        x = self.mid_res2(x, temb)

        for j in range(len(self.up_res)):
            x = x + skips[len(skips) - 1 - j]
            x = self.up_res[j](x, temb)
            if self.up_attn[j] is not None:
                x = self.up_attn[j](x, tokens, recorder)
            if j < len(self.ups):
                x = self.ups[j](x)

        x = self.out_conv(silu(self.out_norm(x)))
        return depth_to_space(x, cfg.stem_factor)


# -- single-sample inference helpers ---------------------------------------------


def _to_nchw(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img.astype(np.float32).transpose(2, 0, 1))[None]


def denoise_step(
    model,
    inp: DenoiserInput,
    sched: NoiseSchedule,
    recorder: AttentionRecorder | None = None,
) -> tuple[np.ndarray, list[AttentionRecord]]:
    """One denoiser forward at inp.t; returns (eps_hat HWC, attention records)."""
    if inp.t < 0 or inp.t >= sched.T:
        raise ShapeError(f"timestep {inp.t} outside schedule range")
    if recorder is not None:
        recorder.current_t = inp.t
    tokens = inp.tokens.tokens
    tok3 = tokens if tokens.ndim == 3 else reshape(tokens, (1,) + tokens.shape)
    with no_grad():
        eps = model.unet(
            Tensor(_to_nchw(inp.z_t)),
            Tensor(_to_nchw(to_model_space(inp.cond_image))),
            Tensor(inp.cond_mask.astype(np.float32)[None, None]),
            np.array([inp.t]),
            tok3,
            recorder,
        )
    eps_np = eps.data[0].transpose(1, 2, 0)
    if not np.all(np.isfinite(eps_np)):
        raise NumericError("denoiser produced non-finite output")
    return eps_np, (recorder.records if recorder is not None else [])


def sample(
    model,
    cond_image: np.ndarray,
    cond_mask: np.ndarray,
    tokens: ReferenceTokens,
    sched: NoiseSchedule,
    rng: Rng,
    guidance_scale: float = 1.0,
) -> np.ndarray:
    """Ancestral DDPM sampling of the refined patch; returns HWC in [0, 1].

    Classifier-free guidance mixes conditional and null-token predictions:
    eps = eps_null + s * (eps_cond - eps_null). With s == 1 the null branch
    is skipped entirely (algebraically identical).
    """
    if guidance_scale < 1.0:
        raise ShapeError(f"guidance_scale must be >= 1, got {guidance_scale}")
    s = cond_image.shape[0]
    cond_t = Tensor(_to_nchw(to_model_space(cond_image)))
    mask_t = Tensor(cond_mask.astype(np.float32)[None, None])
    tok = tokens.tokens
    tok3 = tok if tok.ndim == 3 else reshape(tok, (1,) + tok.shape)
    null3 = model.encoder.null_tokens(1) if guidance_scale != 1.0 else None

    z = rng.normal((1, 3, s, s))
    with no_grad():
        for t in range(sched.T - 1, -1, -1):
            t_arr = np.array([t])
            eps = model.unet(Tensor(z), cond_t, mask_t, t_arr, tok3).data
            if guidance_scale != 1.0:
                eps_null = model.unet(Tensor(z), cond_t, mask_t, t_arr, null3).data
                eps = eps_null + guidance_scale * (eps - eps_null)
            if not np.all(np.isfinite(eps)):
                raise ModelError(f"non-finite denoiser output at t={t}; weights unusable")
            ab_t = sched.alpha_bars[t]
            x0 = (z - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
            x0 = np.clip(x0, -1.0, 1.0)
            if t > 0:
                ab_prev = sched.alpha_bars[t - 1]
                beta_t = sched.betas[t]
                coef_x0 = math.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
                coef_z = math.sqrt(sched.alphas[t]) * (1.0 - ab_prev) / (1.0 - ab_t)
                var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t
                z = coef_x0 * x0 + coef_z * z + math.sqrt(var) * rng.normal(z.shape)
            else:
                z = x0
    return to_unit_range(z[0].transpose(1, 2, 0))
