"""Image buffers, PNG round-trips, resizing, affine warps and color jitter.

Images are float32 HWC arrays in [0, 1]; masks are 2D bool arrays. PNG
masks use 0/255 single-channel encoding. Affine matrices are 2x3, act on
(row, col) coordinates, and map output positions to input positions when
used for warping (inverse mapping).
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, ShapeError


def load_image(path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, np.float32) / 255.0


def save_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img, np.float32), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(Path(path))


def load_mask(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return arr >= 128


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(Path(path))


def image_to_png_bytes(img: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def mask_to_png_bytes(mask: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def png_bytes_to_image(data: bytes) -> np.ndarray:
    import io

    return np.asarray(Image.open(io.BytesIO(data)).convert("RGB"), np.float32) / 255.0


def png_bytes_to_mask(data: bytes) -> np.ndarray:
    import io

    img = Image.open(io.BytesIO(data))
    if img.mode not in ("L", "1", "I", "P"):
        img = img.convert("L")
    return np.asarray(img.convert("L")) >= 128


# -- resizing -------------------------------------------------------------------


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers; channels-last or 2D input."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.astype(np.float32).copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0).astype(np.float32)
    fx = np.clip(xs - x0, 0.0, 1.0).astype(np.float32)
    src = img.astype(np.float32)
    top = src[y0][:, x0] * (1 - fx)[None, :, None] + src[y0][:, x1] * fx[None, :, None] \
        if img.ndim == 3 else src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx)[None, :, None] + src[y1][:, x1] * fx[None, :, None] \
        if img.ndim == 3 else src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    if img.ndim == 3:
        return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    ys = np.minimum((np.arange(out_h) * h) // out_h, h - 1)
    xs = np.minimum((np.arange(out_w) * w) // out_w, w - 1)
    return img[ys][:, xs].copy()


def upsample_grid_nearest(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest upsample of a coarse cell grid to pixel resolution."""
    return resize_nearest(grid, out_h, out_w)


# -- affine geometry --------------------------------------------------------------


def rotation_scale_matrix(angle_deg: float, scale: float, center: tuple[float, float],
                          translate: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Forward map p' = scale * R(angle) (p - c) + c + t on (row, col) points.

    Right-angle rotations use exact {0, +-1} entries so lattice-aligned
    content maps onto the lattice bit-exactly.
    """
    if angle_deg % 90 == 0:
        k = int(angle_deg // 90) % 4
        cos_a, sin_a = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][k]
    else:
        rad = math.radians(angle_deg)
        cos_a, sin_a = math.cos(rad), math.sin(rad)
    cr, cc = center
    tr, tc = translate
    a = scale * cos_a
    b = scale * sin_a
    # row' = a*(r-cr) - b*(c-cc) + cr + tr ; col' = b*(r-cr) + a*(c-cc) + cc + tc
    return np.array(
        [[a, -b, cr + tr - a * cr + b * cc], [b, a, cc + tc - b * cr - a * cc]], np.float64
    )


def invert_affine(m: np.ndarray) -> np.ndarray:
    a, b, e = m[0]
    c, d, f = m[1]
    det = a * d - b * c
    if abs(det) < 1e-12:
        raise DataError("affine matrix is singular")
    inv = np.array([[d, -b, b * f - d * e], [-c, a, c * e - a * f]], np.float64)
    inv[:, :] /= det
    return inv


def apply_affine_points(m: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Transform an (N, 2) array of (row, col) points."""
    return points @ m[:, :2].T + m[:, 2]


def _is_identity(m: np.ndarray) -> bool:
    return bool(np.all(m == np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])))


def warp_affine_bilinear(img: np.ndarray, forward: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Warp an HWC image by the forward map (output = forward(input))."""
    if _is_identity(forward):
        return img.astype(np.float32).copy()
    h, w = img.shape[:2]
    inv = invert_affine(forward)
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    src_r = inv[0, 0] * rows + inv[0, 1] * cols + inv[0, 2]
    src_c = inv[1, 0] * rows + inv[1, 1] * cols + inv[1, 2]
    r0 = np.floor(src_r).astype(int)
    c0 = np.floor(src_c).astype(int)
    fr = (src_r - r0).astype(np.float32)
    fc = (src_c - c0).astype(np.float32)
    out = np.full(img.shape, fill, np.float32)
    valid = (src_r >= -1) & (src_r < h) & (src_c >= -1) & (src_c < w)

    def sample(ri, ci):
        ok = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        vals = np.full(img.shape, fill, np.float32)
        vals[ok] = img[ri[ok], ci[ok]]
        return vals

    v00 = sample(r0, c0)
    v01 = sample(r0, c0 + 1)
    v10 = sample(r0 + 1, c0)
    v11 = sample(r0 + 1, c0 + 1)
    frc = fr[..., None] if img.ndim == 3 else fr
    fcc = fc[..., None] if img.ndim == 3 else fc
    blend = (
        v00 * (1 - frc) * (1 - fcc)
        + v01 * (1 - frc) * fcc
        + v10 * frc * (1 - fcc)
        + v11 * frc * fcc
    )
    out[valid] = blend[valid]
    return out


def warp_affine_nearest(mask: np.ndarray, forward: np.ndarray) -> np.ndarray:
    """Warp a bool mask by the forward map with nearest sampling."""
    if _is_identity(forward):
        return mask.copy()
    h, w = mask.shape
    inv = invert_affine(forward)
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    src_r = np.round(inv[0, 0] * rows + inv[0, 1] * cols + inv[0, 2]).astype(int)
    src_c = np.round(inv[1, 0] * rows + inv[1, 1] * cols + inv[1, 2]).astype(int)
    ok = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
    out = np.zeros_like(mask)
    out[ok] = mask[src_r[ok], src_c[ok]]
    return out


# -- color ------------------------------------------------------------------------


def hue_rotation_matrix(angle_deg: float) -> np.ndarray:
    """Rodrigues rotation of RGB space around the gray diagonal."""
    rad = math.radians(angle_deg)
    cos_a, sin_a = math.cos(rad), math.sin(rad)
    u = np.ones(3) / math.sqrt(3.0)
    ux = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
    return (cos_a * np.eye(3) + sin_a * ux + (1 - cos_a) * np.outer(u, u)).astype(np.float32)


def color_jitter(
    img: np.ndarray,
    mask: np.ndarray | None,
    brightness: float,
    contrast: float,
    hue_deg: float,
) -> np.ndarray:
    """Brightness/contrast/hue adjustment, restricted to ``mask`` when given.

    All-zero parameters return the input bit-identically.
    """
    if brightness == 0.0 and contrast == 0.0 and hue_deg == 0.0:
        return img.astype(np.float32).copy()
    sel = mask if mask is not None else np.ones(img.shape[:2], bool)
    out = img.astype(np.float32).copy()
    region = out[sel]
    if hue_deg != 0.0:
        region = region @ hue_rotation_matrix(hue_deg).T
    if brightness != 0.0:
        region = region * np.float32(1.0 + brightness)
    if contrast != 0.0:
        region = (region - 0.5) * np.float32(1.0 + contrast) + 0.5
    out[sel] = np.clip(region, 0.0, 1.0)
    return out


# -- rendering helpers --------------------------------------------------------------


def heat_to_png_bytes(heat: np.ndarray, upscale: int = 1) -> bytes:
    """8-bit grayscale rendering of a non-negative heat map (max-normalized)."""
    peak = float(heat.max())
    norm = heat / peak if peak > 0 else heat
    img = np.round(np.clip(norm, 0, 1) * 255).astype(np.uint8)
    if upscale > 1:
        img = img.repeat(upscale, 0).repeat(upscale, 1)
    import io

    buf = io.BytesIO()
    Image.fromarray(img, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def overlay_heat(reference: np.ndarray, heat: np.ndarray, alpha: float = 0.55) -> np.ndarray:
    """Alpha-blend a token-grid heat map over the reference (red channel)."""
    h, w = reference.shape[:2]
    peak = float(heat.max())
    norm = heat / peak if peak > 0 else heat
    up = upsample_grid_nearest(norm.astype(np.float32), h, w)
    tint = np.zeros_like(reference)
    tint[..., 0] = 1.0
    weight = (alpha * up)[..., None]
    return reference * (1 - weight) + tint * weight


def overlay_region(reference: np.ndarray, region: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend a boolean token-grid region over the reference (green channel)."""
    h, w = reference.shape[:2]
    up = upsample_grid_nearest(region.astype(np.float32), h, w)
    tint = np.zeros_like(reference)
    tint[..., 1] = 1.0
    weight = (alpha * up)[..., None]
    return reference * (1 - weight) + tint * weight


def crop_by_mask_bbox(img: np.ndarray, mask: np.ndarray, pad: int = 2) -> np.ndarray:
    """Axis-aligned crop around a mask's bounding box (used for identity scoring)."""
    if not mask.any():
        raise ShapeError("cannot crop around an empty mask")
    rows = np.where(mask.any(axis=1))[0]
    cols = np.where(mask.any(axis=0))[0]
    r0, r1 = max(rows[0] - pad, 0), min(rows[-1] + pad + 1, img.shape[0])
    c0, c1 = max(cols[0] - pad, 0), min(cols[-1] + pad + 1, img.shape[1])
    return img[r0:r1, c0:c1].copy()
