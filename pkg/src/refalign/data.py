"""Synthetic scenes, artifact-mask sampling, training pairs and the benchmark.

Scenes are 64x64 RGB: a muted background plus one decal-bearing object with
an exact mask. Objects carry a base pattern (stripes / checker / dots) and
a few high-contrast anchor blobs so that local identity is measurable and
correspondences are learnable. Everything is a pure function of seeds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .alignment import resize_mask
from .errors import DataError, PlacementError, ShapeError
from .images import (
    apply_affine_points,
    color_jitter,
    load_image,
    load_mask,
    rotation_scale_matrix,
    save_image,
    save_mask,
    warp_affine_bilinear,
    warp_affine_nearest,
)
from .rng import Rng

IMAGE_SIZE = 64

# saturated object palette vs muted background palette
_OBJECT_COLORS = np.array(
    [
        [0.90, 0.15, 0.15], [0.15, 0.55, 0.90], [0.95, 0.75, 0.10], [0.20, 0.75, 0.30],
        [0.80, 0.25, 0.80], [0.95, 0.45, 0.10], [0.10, 0.80, 0.75], [0.90, 0.90, 0.90],
        [0.15, 0.15, 0.60], [0.55, 0.30, 0.10],
    ],
    np.float32,
)
_BACKGROUND_COLORS = np.array(
    [
        [0.62, 0.64, 0.66], [0.70, 0.66, 0.58], [0.55, 0.62, 0.58], [0.66, 0.60, 0.64],
        [0.58, 0.58, 0.68], [0.68, 0.62, 0.54],
    ],
    np.float32,
)

# rng stream tags (children of the per-scene seed)
_BG, _SHAPE, _DECAL, _ANCHOR = 11, 12, 13, 14


@dataclass
class SyntheticScene:
    image: np.ndarray  # (S, S, 3) composite
    background: np.ndarray  # (S, S, 3) object-free render
    object_image: np.ndarray  # (S, S, 3) object on black
    object_mask: np.ndarray  # (S, S) bool
    seed: int


@dataclass
class TrainingSample:
    mode: str  # "alignment" | "refinement"
    input_image: np.ndarray
    mask: np.ndarray
    reference: np.ndarray
    target: np.ndarray
    gt_correspondence: np.ndarray | None = None  # token-grid bool


@dataclass
class BenchmarkCase:
    case_id: str
    generated: np.ndarray
    artifact_mask: np.ndarray
    reference: np.ndarray
    gt_correspondence: np.ndarray
    clean: np.ndarray
    corruption: str


@dataclass(frozen=True)
class DataConfig:
    image_size: int = IMAGE_SIZE
    token_grid: int = 8
    blank_fill: float = 0.5
    paired_view_prob: float = 0.5
    erode_iters: int = 1
    crop_ratio: float = 2.0
    gt_coverage: float = 0.2
    mask_median_ratio: float = 0.028  # log-normal median of artifact/image area
    mask_sigma: float = 0.75


@dataclass
class Placement:
    """Inverse mapping of a zoom crop: window origin, side and zoom factor."""

    y0: int
    x0: int
    side: int
    factor: int

    @property
    def identity(self) -> bool:
        return self.factor == 1 and self.y0 == 0 and self.x0 == 0


# -- scene generation ---------------------------------------------------------------


def _smooth_noise(rng: Rng, size: int, cells: int, amplitude: float) -> np.ndarray:
    coarse = rng.normal((cells, cells)) * amplitude
    reps = size // cells
    up = coarse.repeat(reps, 0).repeat(reps, 1)
    return ndimage.uniform_filter(up, size=reps, mode="nearest").astype(np.float32)


def _object_mask(rng: Rng, size: int) -> np.ndarray:
    """One random superellipse / polygon silhouette within area 10-60%."""
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    lo, hi = 0.10 * size * size, 0.60 * size * size
    for _ in range(64):
        kind = rng.choice(["superellipse", "polygon"])
        cy = rng.uniform(size * 0.32, size * 0.68)
        cx = rng.uniform(size * 0.32, size * 0.68)
        if kind == "superellipse":
            a = rng.uniform(size * 0.16, size * 0.40)
            b = rng.uniform(size * 0.16, size * 0.40)
            p = rng.uniform(1.6, 3.5)
            theta = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = dy * np.cos(theta) + dx * np.sin(theta)
            v = -dy * np.sin(theta) + dx * np.cos(theta)
            mask = (np.abs(u / a) ** p + np.abs(v / b) ** p) <= 1.0
        else:
            n_vert = int(rng.integers(5, 9))
            base_r = rng.uniform(size * 0.18, size * 0.38)
            angles = np.sort(rng.uniform(0, 2 * np.pi, (n_vert,)).astype(np.float64))
            radii = base_r * rng.uniform(0.6, 1.25, (n_vert,)).astype(np.float64)
            vy = cy + radii * np.sin(angles)
            vx = cx + radii * np.cos(angles)
            mask = np.zeros((size, size), bool)
            # even-odd rule per scanline pair
            pts_y = np.append(vy, vy[0])
            pts_x = np.append(vx, vx[0])
            inside = np.zeros((size, size), bool)
            for k in range(n_vert):
                y1, x1, y2, x2 = pts_y[k], pts_x[k], pts_y[k + 1], pts_x[k + 1]
                cond = ((y1 <= yy) & (yy < y2)) | ((y2 <= yy) & (yy < y1))
                with np.errstate(divide="ignore", invalid="ignore"):
                    xs = x1 + (yy - y1) / (y2 - y1) * (x2 - x1)
                inside ^= cond & (xx < xs)
            mask = inside
        area = mask.sum()
        if lo <= area <= hi:
            return mask
    raise DataError("could not sample an object silhouette in range")


def _paint_decals(rng: Rng, mask: np.ndarray, size: int) -> np.ndarray:
    """Locally unique texture: a color quilt (one palette color per coarse
    cell, random offset) under a stripe/dot/glyph overlay, plus anchor
    blobs. Repeating patterns alone would make sub-object correspondence
    ambiguous; the quilt keeps every neighborhood distinguishable."""
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    idx = rng.permutation(len(_OBJECT_COLORS))
    obj = np.zeros((size, size, 3), np.float32)

    cell = int(rng.integers(6, 10))
    oy, ox = int(rng.integers(0, cell)), int(rng.integers(0, cell))
    cy = ((yy + oy) // cell).astype(int)
    cx = ((xx + ox) // cell).astype(int)
    palette = _OBJECT_COLORS[rng.permutation(len(_OBJECT_COLORS))]
    color_idx = rng.integers(0, len(palette), (cy.max() + 1, cx.max() + 1))
    obj[mask] = palette[color_idx[cy, cx]][mask]

    kind = rng.choice(["stripes", "dots", "glyphs"])
    c_overlay = _OBJECT_COLORS[idx[0]]
    if kind == "stripes":
        theta = rng.uniform(0, np.pi)
        width = rng.uniform(2.5, 4.5)
        phase = rng.uniform(0, 2 * width)
        band = ((yy * np.sin(theta) + xx * np.cos(theta) + phase) % (2.8 * width)) < width * 0.8
        obj[mask & band] = obj[mask & band] * 0.45 + c_overlay * 0.55
    elif kind == "dots":
        spacing = int(rng.integers(7, 11))
        radius = rng.uniform(1.4, 2.2)
        band = ((yy % spacing) - spacing / 2) ** 2 + ((xx % spacing) - spacing / 2) ** 2 <= radius**2
        obj[mask & band] = obj[mask & band] * 0.3 + c_overlay * 0.7
    else:
        # glyphs: a random 3x3 binary stamp repeated on the quilt lattice
        stamp = rng.uniform(0, 1, (3, 3)) < 0.5
        sy = np.minimum(((yy + oy) % cell / cell * 3).astype(int), 2)
        sx = np.minimum(((xx + ox) % cell / cell * 3).astype(int), 2)
        band = stamp[sy, sx]
        obj[mask & band] = obj[mask & band] * 0.4 + c_overlay * 0.6

    ys, xs = np.where(mask)
    arng = rng.child(_ANCHOR)
    placed: list[tuple[float, float]] = []
    for a in range(int(arng.integers(3, 6))):
        color = _OBJECT_COLORS[idx[(1 + a) % len(idx)]]
        for _ in range(24):
            pick = int(arng.integers(0, len(ys)))
            py, px = float(ys[pick]), float(xs[pick])
            if all((py - qy) ** 2 + (px - qx) ** 2 > 64 for qy, qx in placed):
                placed.append((py, px))
                r = arng.uniform(2.0, 3.2)
                blob = (yy - py) ** 2 + (xx - px) ** 2 <= r * r
                obj[mask & blob] = color
                break
    return obj


def gen_scene(seed: int) -> SyntheticScene:
    """Deterministic scene: textured background + one decal-bearing object."""
    size = IMAGE_SIZE
    root = Rng(seed)
    bg_rng = root.child(_BG)
    c1 = _BACKGROUND_COLORS[int(bg_rng.integers(0, len(_BACKGROUND_COLORS)))]
    c2 = _BACKGROUND_COLORS[int(bg_rng.integers(0, len(_BACKGROUND_COLORS)))]
    ramp = np.linspace(0, 1, size, dtype=np.float32)
    if bg_rng.random() < 0.5:
        grad = ramp[:, None, None]
    else:
        grad = ramp[None, :, None]
    background = c1 * (1 - grad) + c2 * grad
    background = background + _smooth_noise(bg_rng, size, 8, 0.05)[..., None]
    background = np.clip(background, 0.0, 1.0).astype(np.float32)

    mask = _object_mask(root.child(_SHAPE), size)
    obj = _paint_decals(root.child(_DECAL), mask, size)

    image = background.copy()
    image[mask] = obj[mask]
    # exact-mask guarantee: nudge any object pixel that matched the background
    same = mask & np.all(image == background, axis=-1)
    if same.any():
        vals = obj[same]
        vals[:, 0] = np.where(vals[:, 0] < 0.5, vals[:, 0] + 1.0 / 255.0, vals[:, 0] - 1.0 / 255.0)
        obj[same] = vals
        image[same] = vals
    return SyntheticScene(image=image, background=background, object_image=obj, object_mask=mask, seed=seed)


# -- artifact masks -------------------------------------------------------------------


def gen_artifact_mask(object_mask: np.ndarray, rng: Rng) -> np.ndarray:
    """Union of 1-3 thick quadratic strokes clipped to the object.

    The target area ratio (relative to the full image) is log-normal with a
    median under 4%, matching the tiny-and-irregular statistics the model
    is designed around.
    """
    size = object_mask.shape[0]
    n_obj = int(object_mask.sum())
    if n_obj < 16:
        raise DataError(f"object mask too small for artifact sampling ({n_obj} px)")
    cfg = DataConfig()
    ratio = float(np.exp(np.log(cfg.mask_median_ratio) + cfg.mask_sigma * rng.normal(())))
    ratio = float(np.clip(ratio, 0.004, 0.16))
    budget = ratio * size * size

    ys, xs = np.where(object_mask)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    for _ in range(20):
        n_strokes = int(rng.integers(1, 4))
        weights = rng.uniform(0.5, 1.0, (n_strokes,))
        weights = weights / weights.sum()
        canvas = np.zeros((size, size), bool)
        for s in range(n_strokes):
            stroke_budget = budget * float(weights[s])
            i0 = int(rng.integers(0, len(ys)))
            i2 = int(rng.integers(0, len(ys)))
            p0 = np.array([ys[i0], xs[i0]], np.float64)
            p2 = np.array([ys[i2], xs[i2]], np.float64)
            mid = (p0 + p2) / 2
            normal = np.array([-(p2 - p0)[1], (p2 - p0)[0]])
            norm_len = np.hypot(*normal) + 1e-9
            p1 = mid + normal / norm_len * rng.uniform(-0.4, 0.4) * norm_len
            length = max(np.hypot(*(p2 - p0)), 3.0)
            width = float(np.clip(stroke_budget / length, 1.6, 9.0))
            steps = max(int(length * 1.5), 8)
            ts = np.linspace(0, 1, steps)
            pts = ((1 - ts) ** 2)[:, None] * p0 + (2 * ts * (1 - ts))[:, None] * p1 + (ts**2)[:, None] * p2
            radii = width / 2 * (0.75 + 0.5 * np.sin(ts * np.pi))
            for (py, px), r in zip(pts, radii):
                r = max(r, 0.9)
                y_lo, y_hi = max(int(py - r - 1), 0), min(int(py + r + 2), size)
                x_lo, x_hi = max(int(px - r - 1), 0), min(int(px + r + 2), size)
                win = (yy[y_lo:y_hi, x_lo:x_hi] - py) ** 2 + (xx[y_lo:y_hi, x_lo:x_hi] - px) ** 2 <= r * r
                canvas[y_lo:y_hi, x_lo:x_hi] |= win
        clipped = canvas & object_mask
        if clipped.any():
            return clipped
    raise DataError("failed to sample a non-empty artifact mask")


# -- perturbations --------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbParams:
    angle_deg: float
    scale: float
    translate: tuple[float, float]
    brightness: float
    contrast: float
    hue_deg: float

    @classmethod
    def identity(cls) -> "PerturbParams":
        return cls(0.0, 1.0, (0.0, 0.0), 0.0, 0.0, 0.0)


@dataclass
class Perturbation:
    params: PerturbParams
    matrix: np.ndarray  # forward affine on (row, col) points


def _sample_params(rng: Rng, size: int) -> PerturbParams:
    return PerturbParams(
        angle_deg=float(rng.uniform(-20.0, 20.0)),
        scale=float(rng.uniform(0.8, 1.2)),
        translate=(float(rng.uniform(-0.1, 0.1)) * size, float(rng.uniform(-0.1, 0.1)) * size),
        brightness=float(rng.uniform(-0.2, 0.2)),
        contrast=float(rng.uniform(-0.2, 0.2)),
        hue_deg=float(rng.uniform(-15.0, 15.0)),
    )


def perturb(
    img: np.ndarray,
    mask: np.ndarray,
    rng: Rng,
    params: PerturbParams | None = None,
) -> tuple[np.ndarray, np.ndarray, Perturbation]:
    """Affine view change then color jitter; the object stays inside the frame.

    Out-of-frame transforms are resampled (10 tries) before raising
    PlacementError. Explicit ``params`` bypass sampling (identity params
    reproduce the input bit-exactly).
    """
    size = img.shape[0]
    center = ((size - 1) / 2.0, (size - 1) / 2.0)
    coords = np.argwhere(mask).astype(np.float64)
    if coords.size == 0:
        raise DataError("perturb needs a non-empty object mask")
    for attempt in range(10):
        p = params if params is not None else _sample_params(rng, size)
        fwd = rotation_scale_matrix(p.angle_deg, p.scale, center, p.translate)
        moved = apply_affine_points(fwd, coords)
        if params is None and (moved.min() < -0.5 or moved.max() > size - 0.5):
            continue
        warped = warp_affine_bilinear(img, fwd, fill=0.0)
        warped_mask = warp_affine_nearest(mask, fwd)
        jittered = color_jitter(warped, warped_mask, p.brightness, p.contrast, p.hue_deg)
        return jittered, warped_mask, Perturbation(params=p, matrix=fwd)
    raise PlacementError("object left the frame in 10 consecutive transform draws")


# -- token-grid ground truth ------------------------------------------------------------


def token_region(mask: np.ndarray, grid: int, coverage: float = 0.2) -> np.ndarray:
    """Binarized token-grid footprint of a pixel mask (fallback: peak cell)."""
    soft = resize_mask(mask, grid)
    region = soft >= coverage
    if not region.any():
        region = soft >= float(soft.max()) if soft.max() > 0 else region
    return region


# -- training pairs ----------------------------------------------------------------------


def _blank(img: np.ndarray, mask: np.ndarray, fill: float) -> np.ndarray:
    out = img.copy()
    out[mask] = fill
    return out


def _erode(mask: np.ndarray, iters: int) -> np.ndarray:
    if iters <= 0:
        return mask.copy()
    out = ndimage.binary_erosion(mask, structure=np.ones((3, 3), bool), iterations=iters)
    return out if out.any() else mask.copy()


def make_pair(scene: SyntheticScene, mode: str, rng: Rng, cfg: DataConfig = DataConfig()) -> TrainingSample:
    """Construct one self-supervised sample.

    alignment: the whole object is blanked and must be completed from a
    perturbed complete reference. refinement: a free-form artifact region
    is blanked and the reference shows only the corresponding region
    (50/50 same-scene partial reference or paired-view with eroded masks);
    refinement samples are zoom-cropped around the hole.
    """
    if mode == "alignment":
        ref, ref_mask, pert = perturb(scene.object_image, scene.object_mask, rng)
        inp = _blank(scene.image, scene.object_mask, cfg.blank_fill)
        return TrainingSample(
            mode=mode,
            input_image=inp,
            mask=scene.object_mask.copy(),
            reference=ref,
            target=scene.image.copy(),
            gt_correspondence=token_region(ref_mask, cfg.token_grid, cfg.gt_coverage),
        )
    if mode != "refinement":
        raise DataError(f"unknown training mode {mode!r}")

    if rng.random() < cfg.paired_view_prob:
        # paired-view: two independent views of the same object
        ref_obj, m1, _ = perturb(scene.object_image, scene.object_mask, rng)
        e1 = _erode(m1, cfg.erode_iters)
        reference = np.where(e1[..., None], ref_obj, 0.0).astype(np.float32)
        v2_obj, m2, _ = perturb(scene.object_image, scene.object_mask, rng)
        scene2 = np.where(m2[..., None], v2_obj, scene.background).astype(np.float32)
        hole = _erode(m2, cfg.erode_iters)
        inp = _blank(scene2, hole, cfg.blank_fill)
        target = scene2
        mask = hole
        gt = token_region(e1, cfg.token_grid, cfg.gt_coverage)
    else:
        # same-scene: partial reference showing exactly the artifact region
        mask = gen_artifact_mask(scene.object_mask, rng)
        region_img = np.where(mask[..., None], scene.image, 0.0).astype(np.float32)
        reference, ref_mask, pert = perturb(region_img, mask, rng)
        inp = _blank(scene.image, mask, cfg.blank_fill)
        target = scene.image.copy()
        gt = token_region(ref_mask, cfg.token_grid, cfg.gt_coverage)

    patch, patch_mask, place = zoom_crop(inp, mask, cfg.crop_ratio)
    target_patch = crop_with_placement(target, place)
    return TrainingSample(
        mode=mode,
        input_image=patch,
        mask=patch_mask,
        reference=reference,
        target=target_patch,
        gt_correspondence=gt,
    )


# -- zoom-in cropping ----------------------------------------------------------------------


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def zoom_crop(img: np.ndarray, mask: np.ndarray, ratio: float = 2.0) -> tuple[np.ndarray, np.ndarray, Placement]:
    """Square crop around the mask bbox, expanded by ``ratio``, zoomed to full size.

    The crop side is rounded up to a power of two so the zoom factor is an
    exact integer; nearest upsampling with stride-sampled paste-back makes
    the round trip bit-exact.
    """
    if ratio < 1.0:
        raise DataError(f"crop ratio must be >= 1, got {ratio}")
    if not mask.any():
        raise DataError("zoom_crop needs a non-empty mask")
    size = img.shape[0]
    rows = np.where(mask.any(axis=1))[0]
    cols = np.where(mask.any(axis=0))[0]
    bh = int(rows[-1] - rows[0] + 1)
    bw = int(cols[-1] - cols[0] + 1)
    side = min(_next_pow2(max(int(np.ceil(ratio * max(bh, bw))), 8)), size)
    cy = (rows[0] + rows[-1] + 1) // 2
    cx = (cols[0] + cols[-1] + 1) // 2
    y0 = int(np.clip(cy - side // 2, 0, size - side))
    x0 = int(np.clip(cx - side // 2, 0, size - side))
    factor = size // side
    place = Placement(y0=y0, x0=x0, side=side, factor=factor)
    patch = img[y0 : y0 + side, x0 : x0 + side].repeat(factor, 0).repeat(factor, 1)
    patch_mask = mask[y0 : y0 + side, x0 : x0 + side].repeat(factor, 0).repeat(factor, 1)
    return patch.copy(), patch_mask.copy(), place


def crop_with_placement(img: np.ndarray, place: Placement) -> np.ndarray:
    win = img[place.y0 : place.y0 + place.side, place.x0 : place.x0 + place.side]
    return win.repeat(place.factor, 0).repeat(place.factor, 1).copy()


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Euclidean-disc dilation (radius in pixels)."""
    if radius <= 0:
        return mask.copy()
    dist = ndimage.distance_transform_edt(~mask)
    return dist <= radius


def feather_weights(mask: np.ndarray, feather_px: int) -> np.ndarray:
    """Cosine blend ramp: 1 inside the mask, 0 beyond the feather radius."""
    if feather_px <= 0:
        return mask.astype(np.float32)
    dist = ndimage.distance_transform_edt(~mask)
    w = 0.5 * (1.0 + np.cos(np.pi * np.clip(dist / feather_px, 0.0, 1.0)))
    w[dist >= feather_px] = 0.0
    w[mask] = 1.0
    return w.astype(np.float32)


def paste_back(
    original: np.ndarray,
    refined_patch: np.ndarray,
    place: Placement,
    mask: np.ndarray,
    feather_px: int = 4,
) -> np.ndarray:
    """Composite the refined zoom patch back, feathered around the mask.

    Pixels outside dilate(mask, feather_px) are bit-identical to the
    original; blending uses a + w*(b - a) so an unmodified patch
    reproduces the original exactly.
    """
    size = original.shape[0]
    if refined_patch.shape[0] != size or refined_patch.shape[1] != size:
        raise ShapeError(f"refined patch {refined_patch.shape} does not match image size {size}")
    if place.y0 + place.side > size or place.x0 + place.side > size:
        raise ShapeError("placement window exceeds the image")
    small = refined_patch[:: place.factor, :: place.factor]
    pasted = original.copy()
    pasted[place.y0 : place.y0 + place.side, place.x0 : place.x0 + place.side] = small
    w = feather_weights(mask, feather_px)
    sel = w > 0
    out = original.copy()
    out[sel] = original[sel] + w[sel][:, None] * (pasted[sel] - original[sel])
    return out


# -- benchmark -----------------------------------------------------------------------------


def _corrupt(img: np.ndarray, mask: np.ndarray, kind: str, rng: Rng) -> np.ndarray:
    out = img.copy()
    if kind == "decal_swap":
        region = out[mask]
        rolled = np.roll(region, 1, axis=-1)  # rotate channels: strong hue shift
        out[mask] = np.clip(1.0 - 0.25 * region + 0.75 * rolled, 0.0, 1.0)
    elif kind == "blur":
        blurred = ndimage.uniform_filter(img, size=(7, 7, 1), mode="nearest")
        out[mask] = blurred[mask]
    elif kind == "scramble":
        idx = np.where(mask.reshape(-1))[0]
        perm = idx.copy()
        rng.shuffle(perm)
        flat = out.reshape(-1, 3)
        flat[idx] = flat[perm]
        out = flat.reshape(img.shape)
    else:
        raise DataError(f"unknown corruption kind {kind!r}")
    return out


def gen_benchmark(n_cases: int, rng: Rng, cfg: DataConfig = DataConfig()) -> list[BenchmarkCase]:
    """Synthetic evaluation cases: locally corrupted objects with exact
    token-grid correspondence ground truth on the perturbed reference."""
    kinds = ["decal_swap", "blur", "scramble"]
    cases = []
    i = 0
    draw = 0
    while i < n_cases:
        case_rng = rng.child(draw)
        draw += 1
        scene = gen_scene(int(case_rng.integers(0, 2**31)))
        try:
            mask = gen_artifact_mask(scene.object_mask, case_rng.child(1))
            reference, ref_mask, pert = perturb(scene.object_image, scene.object_mask, case_rng.child(2))
        except (DataError, PlacementError):
            continue
        kind = kinds[i % len(kinds)]
        generated = _corrupt(scene.image, mask, kind, case_rng.child(3))
        moved_mask = warp_affine_nearest(mask, pert.matrix)
        if not moved_mask.any():
            continue
        gt = token_region(moved_mask, cfg.token_grid, cfg.gt_coverage)
        cases.append(
            BenchmarkCase(
                case_id=f"case{i:04d}",
                generated=generated,
                artifact_mask=mask,
                reference=reference,
                gt_correspondence=gt,
                clean=scene.image,
                corruption=kind,
            )
        )
        i += 1
    return cases


def write_benchmark(cases: list[BenchmarkCase], out_dir) -> Path:
    """PNG + JSON manifest layout: [{id, generated, mask, reference, gt_correspondence}]."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for case in cases:
        prefix = out_dir / case.case_id
        save_image(f"{prefix}_generated.png", case.generated)
        save_mask(f"{prefix}_mask.png", case.artifact_mask)
        save_image(f"{prefix}_reference.png", case.reference)
        save_mask(f"{prefix}_gt.png", case.gt_correspondence)
        manifest.append(
            {
                "id": case.case_id,
                "generated": f"{case.case_id}_generated.png",
                "mask": f"{case.case_id}_mask.png",
                "reference": f"{case.case_id}_reference.png",
                "gt_correspondence": f"{case.case_id}_gt.png",
            }
        )
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def read_benchmark(manifest_path) -> list[BenchmarkCase]:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    try:
        entries = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    cases = []
    for entry in entries:
        try:
            generated = load_image(base / entry["generated"])
            mask = load_mask(base / entry["mask"])
            reference = load_image(base / entry["reference"])
            gt = load_mask(base / entry["gt_correspondence"])
        except (OSError, KeyError) as exc:
            raise DataError(f"manifest entry {entry.get('id')} is broken: {exc}") from exc
        cases.append(
            BenchmarkCase(
                case_id=entry["id"],
                generated=generated,
                artifact_mask=mask,
                reference=reference,
                gt_correspondence=gt,
                clean=generated,
                corruption="unknown",
            )
        )
    return cases
