"""Cross-attention correspondence extraction and the (t, l) grid search.

Pipeline per (timestep, block): resize the artifact mask to the block's
feature grid as fractional coverage weights, aggregate the recorded
attention rows under those weights into a token-grid heat map, post-process
(boundary-noise removal, relative threshold, largest 4-connected blob),
and score against ground truth with IoU. The full search scores every
(t, l) cell into a table; inference runs a single fixed (t, l).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .diffusion import AttentionRecord, AttentionRecorder, DenoiserInput, build_cond_image, denoise_step, forward_diffuse, to_model_space
from .errors import DataError, EmptyRegionError, ShapeError
from .rng import Rng
from .serialize import load_tensor, save_tensor

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], bool)


@dataclass
class CorrespondenceMap:
    """Token-grid heat map aggregated from one attention record."""

    heat: np.ndarray  # (g_h, g_w) float32, non-negative
    t: int
    l: int


@dataclass
class CorrespondenceRegion:
    """Binary token-grid region: a single 4-connected component."""

    region: np.ndarray  # (g_h, g_w) bool
    source: tuple[int, int]
    area: int = field(init=False)

    def __post_init__(self):
        self.area = int(self.region.sum())


@dataclass(frozen=True)
class PostprocessParams:
    threshold_frac: float = 0.4  # relative to the heat maximum
    ring_sigmas: float = 2.0  # boundary cells above mu + k*sigma of interior are noise suspects


@dataclass
class GridSearchTable:
    gamma: np.ndarray  # (T, L) float32 of IoU scores
    argmax: tuple[int, int] = field(init=False)

    def __post_init__(self):
        flat = int(np.argmax(self.gamma))  # first max in row-major order: smaller t, then smaller l
        self.argmax = (flat // self.gamma.shape[1], flat % self.gamma.shape[1])

    def to_csv(self, path) -> None:
        np.savetxt(path, self.gamma, delimiter=",", fmt="%.6f")

    @classmethod
    def from_csv(cls, path) -> "GridSearchTable":
        gamma = np.loadtxt(path, delimiter=",", dtype=np.float32)
        return cls(gamma=np.atleast_2d(gamma))


def resize_mask(mask: np.ndarray, d: int) -> np.ndarray:
    """Area-averaged downsample of an HxW mask to (d, d) coverage weights.

    Output cells hold fractional coverage in [0, 1]; no re-binarization, so
    thin structures keep their mass. Upsampling is not supported.
    """
    h, w = mask.shape
    if d > h or d > w:
        raise ShapeError(f"resize_mask cannot upsample {h}x{w} to {d}x{d}")
    m = mask.astype(np.float64)
    if h % d == 0 and w % d == 0:
        fh, fw = h // d, w // d
        return m.reshape(d, fh, d, fw).mean(axis=(1, 3)).astype(np.float32)
    # fractional tiling: integrate the mask over each output cell's box
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = m.cumsum(0).cumsum(1)

    def box_sum(r0, r1, c0, c1):
        # bilinear-interpolated integral image evaluation at real coords
        def at(r, c):
            ri, ci = int(math.floor(r)), int(math.floor(c))
            fr, fc = r - ri, c - ci
            ri2, ci2 = min(ri + 1, h), min(ci + 1, w)
            return (
                integral[ri, ci] * (1 - fr) * (1 - fc)
                + integral[ri, ci2] * (1 - fr) * fc
                + integral[ri2, ci] * fr * (1 - fc)
                + integral[ri2, ci2] * fr * fc
            )

        return at(r1, c1) - at(r0, c1) - at(r1, c0) + at(r0, c0)

    out = np.zeros((d, d))
    sh, sw = h / d, w / d
    for i in range(d):
        for j in range(d):
            s = box_sum(i * sh, (i + 1) * sh, j * sw, (j + 1) * sw)
            out[i, j] = s / (sh * sw)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def aggregate(record: AttentionRecord, soft_mask: np.ndarray, grid: tuple[int, int] | None = None) -> CorrespondenceMap:
    """Sum attention rows weighted by mask coverage: heat[k] = sum_ij m[ij] A[ij, k]."""
    d = record.d
    if soft_mask.shape != (d, d):
        raise ShapeError(f"soft mask {soft_mask.shape} does not match feature grid {(d, d)}")
    n_tok = record.A.shape[1]
    if grid is None:
        g = int(round(math.sqrt(n_tok)))
        if g * g != n_tok:
            raise ShapeError(f"cannot infer a square grid from {n_tok} tokens")
        grid = (g, g)
    if grid[0] * grid[1] != n_tok:
        raise ShapeError(f"grid {grid} incompatible with {n_tok} tokens")
    heat = record.A.T.astype(np.float64) @ soft_mask.reshape(-1).astype(np.float64)
    return CorrespondenceMap(heat=heat.reshape(grid).astype(np.float32), t=record.t, l=record.l)


def _boundary_noise_filter(heat: np.ndarray, sigmas: float) -> np.ndarray:
    """Zero isolated bright cells on the outer ring of the grid.

    A ring cell is removed when it exceeds mu + k*sigma of the interior
    cells and none of its 4-neighbors does.
    """
    g_h, g_w = heat.shape
    if g_h < 3 or g_w < 3:
        return heat
    interior = heat[1:-1, 1:-1]
    if float(interior.max()) <= 0.0:
        return heat  # no interior signal to estimate noise against
    thresh = float(interior.mean()) + sigmas * float(interior.std())
    hot = heat > thresh
    cross = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], np.int32)
    has_hot_neighbor = ndimage.convolve(hot.astype(np.int32), cross, mode="constant") > 0
    ring = np.zeros_like(hot)
    ring[0, :] = ring[-1, :] = ring[:, 0] = ring[:, -1] = True
    out = heat.copy()
    out[ring & hot & ~has_hot_neighbor] = 0.0
    return out


def postprocess(cmap: CorrespondenceMap, params: PostprocessParams = PostprocessParams()) -> CorrespondenceRegion:
    """Heat map -> single binary region (Algorithm: noise filter, relative
    threshold, 4-connected labeling, keep the largest component).

    Equal-area components tie-break to the first found in row-major order.
    """
    heat = cmap.heat
    if np.any(heat < 0):
        raise DataError("correspondence heat must be non-negative")
    filtered = _boundary_noise_filter(heat, params.ring_sigmas)
    peak = float(filtered.max())
    if peak <= 0.0:
        raise EmptyRegionError(f"no correspondence mass at (t={cmap.t}, l={cmap.l})")
    binary = filtered >= params.threshold_frac * peak
    labels, count = ndimage.label(binary, structure=FOUR_CONNECTED)
    if count == 0:
        raise EmptyRegionError(f"thresholding removed all cells at (t={cmap.t}, l={cmap.l})")
    areas = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, count + 1))
    best = int(np.argmax(areas)) + 1  # argmax returns the first max: row-major first-found
    return CorrespondenceRegion(region=labels == best, source=(cmap.t, cmap.l))


def miou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    if pred.shape != gt.shape:
        raise ShapeError(f"miou shapes differ: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    union = np.logical_or(p, g).sum(dtype=np.float64)
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum(dtype=np.float64) / union)


def alignment_latent(
    artifact_img: np.ndarray, mask: np.ndarray, t: int, sched, seed: int
) -> np.ndarray:
    """The noisy query image for attention extraction at timestep t.

    The masked region is filled mid-gray, the result forward-diffused to t
    with a per-t deterministic noise stream so that single-step extraction
    and the grid search see bit-identical latents.
    """
    base = to_model_space(build_cond_image(artifact_img, mask))
    noise = Rng(seed).child(int(t)).normal(base.shape)
    return forward_diffuse(base, int(t), noise, sched)


def extract_heats(
    model,
    artifact_img: np.ndarray,
    mask: np.ndarray,
    tokens,
    t: int,
    sched,
    seed: int,
) -> list[AttentionRecord]:
    """One recorded denoiser forward at t over the gray-filled artifact image."""
    recorder = AttentionRecorder()
    z_t = alignment_latent(artifact_img, mask, t, sched, seed)
    inp = DenoiserInput(z_t=z_t, cond_image=build_cond_image(artifact_img, mask), cond_mask=mask.astype(np.float32), t=int(t), tokens=tokens)
    denoise_step(model, inp, sched, recorder)
    return recorder.records


def align_single(
    artifact_img: np.ndarray,
    mask: np.ndarray,
    reference_img: np.ndarray,
    model,
    t_fixed: int,
    l_fixed: int,
    params: PostprocessParams = PostprocessParams(),
    seed: int = 0,
) -> tuple[CorrespondenceRegion, CorrespondenceMap]:
    """Single-pass correspondence at a fixed (t, l): one denoiser forward."""
    if l_fixed >= model.unet.n_xattn_blocks or l_fixed < 0:
        raise ShapeError(f"block index {l_fixed} outside [0, {model.unet.n_xattn_blocks})")
    sched = model.schedule
    if t_fixed < 0 or t_fixed >= sched.T:
        raise ShapeError(f"timestep {t_fixed} outside [0, {sched.T})")
    if not mask.any():
        raise DataError("artifact mask is empty")
    tokens = model.encoder.encode_reference(reference_img)
    records = extract_heats(model, artifact_img, mask, tokens, t_fixed, sched, seed)
    record = records[l_fixed]
    soft = resize_mask(mask, record.d)
    cmap = aggregate(record, soft, model.token_grid)
    return postprocess(cmap, params), cmap


def grid_search(
    case: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
    model,
    sched=None,
    params: PostprocessParams = PostprocessParams(),
    seed: int = 0,
) -> GridSearchTable:
    """Score correspondence IoU at every (t, l): Gamma is (T, L).

    ``case`` is (artifact image, artifact mask, reference image, token-grid
    ground truth). Cells whose post-processing finds no region score 0.
    """
    artifact_img, mask, reference_img, gt = case
    sched = sched or model.schedule
    tokens = model.encoder.encode_reference(reference_img)
    L = model.unet.n_xattn_blocks
    gamma = np.zeros((sched.T, L), np.float32)
    soft_by_d: dict[int, np.ndarray] = {}
    for t in range(sched.T):
        records = extract_heats(model, artifact_img, mask, tokens, t, sched, seed)
        for record in records:
            if record.d not in soft_by_d:
                soft_by_d[record.d] = resize_mask(mask, record.d)
            cmap = aggregate(record, soft_by_d[record.d], model.token_grid)
            try:
                region = postprocess(cmap, params)
            except EmptyRegionError:
                continue
            gamma[t, record.l] = miou(region.region, gt)
    return GridSearchTable(gamma=gamma)


# -- standalone attention dumps ----------------------------------------------------

_DUMP_RE = re.compile(r"attn_t(\d+)_l(\d+)\.rbat$")


def dump_attention_records(records: list[AttentionRecord], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for rec in records:
        path = out_dir / f"attn_t{rec.t}_l{rec.l}.rbat"
        save_tensor(path, rec.A)
        paths.append(path)
    return paths


def load_attention_records(dump_dir) -> list[AttentionRecord]:
    records = []
    for path in sorted(Path(dump_dir).iterdir()):
        m = _DUMP_RE.search(path.name)
        if not m:
            continue
        a = load_tensor(path)
        if a.ndim != 2:
            raise DataError(f"{path} is not a 2D attention map")
        d = int(round(math.sqrt(a.shape[0])))
        if d * d != a.shape[0]:
            raise DataError(f"{path} rows do not form a square feature grid")
        records.append(AttentionRecord(t=int(m.group(1)), l=int(m.group(2)), d=d, A=a))
    if not records:
        raise DataError(f"no attention dumps found in {dump_dir}")
    return records
