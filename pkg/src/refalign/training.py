"""Noise-prediction training over the two self-supervised sample modes."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DataConfig, SyntheticScene, TrainingSample, gen_scene, make_pair
from .diffusion import build_cond_image, forward_diffuse, to_model_space
from .errors import DataError, NumericError, PlacementError
from .model import ModelConfig, RefinerModel
from .optim import Adam
from .rng import Rng
from .tensor import Tensor

_MODEL_INIT_STREAM = 101


@dataclass(frozen=True)
class TrainConfig:
    # toy-scale defaults; the full-scale recipe uses batch 192 with
    # learning rates 1e-5 (U-Net) and 4e-5 (adapter)
    batch_size: int = 16
    lr_unet: float = 1e-4
    lr_adapter: float = 4e-4
    cond_dropout: float = 0.1
    steps: int = 2000
    seed: int = 0
    mode_mix: float = 0.5  # fraction of alignment-mode samples
    n_scenes: int = 256
    checkpoint_every: int = 500
    log_every: int = 25

    def __post_init__(self):
        if not (0.0 <= self.cond_dropout <= 1.0):
            raise DataError(f"cond_dropout {self.cond_dropout} outside [0, 1]")
        if self.lr_unet <= 0 or self.lr_adapter <= 0:
            raise DataError("learning rates must be positive")


class SceneStream:
    """Batch sampler over a fixed pool of scenes; pure function of (seed, step)."""

    def __init__(self, scenes: list[SyntheticScene], cfg: TrainConfig, data_cfg: DataConfig = DataConfig()):
        if not scenes:
            raise DataError("empty scene pool")
        self.scenes = scenes
        self.cfg = cfg
        self.data_cfg = data_cfg

    def batch(self, step: int) -> list[TrainingSample]:
        rng = Rng(self.cfg.seed).child(step)
        samples = []
        for b in range(self.cfg.batch_size):
            srng = rng.child(b)
            first = int(srng.integers(0, len(self.scenes)))
            mode = "alignment" if srng.random() < self.cfg.mode_mix else "refinement"
            # an oversized object may not fit any sampled transform; walk on
            for attempt in range(8):
                scene = self.scenes[(first + attempt) % len(self.scenes)]
                try:
                    samples.append(make_pair(scene, mode, srng.child(attempt + 1), self.data_cfg))
                    break
                except PlacementError:
                    continue
            else:
                raise DataError("could not build a sample from 8 consecutive scenes")
        return samples


def default_scene_pool(n_scenes: int, seed: int) -> list[SyntheticScene]:
    base = Rng(seed).child(7_777)
    return [gen_scene(int(base.child(i).integers(0, 2**31))) for i in range(n_scenes)]


def _stack_batch(batch: list[TrainingSample]):
    size = batch[0].input_image.shape[0]
    targets = np.stack([to_model_space(s.target) for s in batch]).transpose(0, 3, 1, 2)
    conds = np.stack([to_model_space(build_cond_image(s.input_image, s.mask)) for s in batch]).transpose(0, 3, 1, 2)
    masks = np.stack([s.mask.astype(np.float32) for s in batch])[:, None]
    refs = np.stack([s.reference for s in batch])
    assert targets.shape[-1] == size
    return targets, conds, masks, refs


def loss_step(
    batch: list[TrainingSample],
    model: RefinerModel,
    sched,
    rng: Rng,
    cond_dropout: float = 0.1,
    null_usage: list[bool] | None = None,
) -> Tensor:
    """Mean squared error between drawn and predicted noise over the batch.

    Per sample: uniform timestep, fresh Gaussian noise, forward-diffused
    target, and with probability ``cond_dropout`` the reference tokens are
    replaced by the learned null token (recorded in ``null_usage`` when a
    list is supplied).
    """
    if not batch:
        raise DataError("empty batch")
    targets, conds, masks, refs = _stack_batch(batch)
    bsz = targets.shape[0]
    t = rng.integers(0, sched.T, (bsz,))
    eps = rng.normal(targets.shape)
    z = forward_diffuse(targets, t, eps, sched)

    tokens = model.encoder.encode_batch(refs)
    drop = np.array([rng.random() < cond_dropout for _ in range(bsz)], bool)
    if null_usage is not None:
        null_usage.extend(drop.tolist())
    if drop.any():
        keep = Tensor((~drop).astype(np.float32).reshape(bsz, 1, 1))
        nulls = model.encoder.null_tokens(bsz)
        tokens = tokens * keep + nulls * (1.0 - keep)

    eps_hat = model.unet(Tensor(z), Tensor(conds), Tensor(masks), t, tokens)
    loss = ((eps_hat - Tensor(eps)) ** 2).mean()
    if not np.isfinite(loss.item()):
        raise NumericError(
            f"non-finite loss at t={t.tolist()}; check weights and inputs"
        )
    return loss


@dataclass
class TrainResult:
    model: RefinerModel
    checkpoint_path: Path | None
    losses: list[float]
    realized_mix: float
    wall_seconds: float


def build_optimizer(model: RefinerModel, cfg: TrainConfig) -> Adam:
    """Adapter MLP and null token learn fast; U-Net and encoder body slower."""
    adapter, body = [], []
    for name, p in model.named_parameters():
        if name.startswith("encoder.adapter") or name.startswith("encoder.null_token"):
            adapter.append(p)
        else:
            body.append(p)
    return Adam([(body, cfg.lr_unet), (adapter, cfg.lr_adapter)])


def train(
    cfg: TrainConfig,
    stream: SceneStream | None = None,
    model: RefinerModel | None = None,
    model_cfg: ModelConfig | None = None,
    out_dir: str | Path | None = None,
    start_step: int = 0,
    progress: bool = False,
) -> TrainResult:
    """Optimize the shared model over mixed-mode batches.

    Both modes update the same parameter set. Loss log goes to
    ``loss_log.csv`` (step, loss, realized alignment-mode fraction);
    checkpoints are written atomically every ``checkpoint_every`` steps.
    """
    model_cfg = model_cfg or ModelConfig()
    if model is None:
        model = RefinerModel(model_cfg, Rng(cfg.seed).child(_MODEL_INIT_STREAM))
    sched = model.schedule
    if stream is None:
        stream = SceneStream(default_scene_pool(cfg.n_scenes, cfg.seed), cfg)
    optimizer = build_optimizer(model, cfg)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_rows: list[tuple[int, float, float]] = []
    losses: list[float] = []
    align_count = 0
    sample_count = 0
    ckpt_path = None
    t_start = time.perf_counter()

    for step in range(start_step, start_step + cfg.steps):
        batch = stream.batch(step)
        align_count += sum(1 for s in batch if s.mode == "alignment")
        sample_count += len(batch)
        step_rng = Rng(cfg.seed).child(1_000_000 + step)
        loss = loss_step(batch, model, sched, step_rng, cfg.cond_dropout)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        value = loss.item()
        losses.append(value)
        if step % cfg.log_every == 0 or step == start_step + cfg.steps - 1:
            log_rows.append((step, value, align_count / max(sample_count, 1)))
            if progress:
                print(f"step {step}: loss {value:.4f}", flush=True)
        if out_dir is not None and (
            (step + 1) % cfg.checkpoint_every == 0 or step == start_step + cfg.steps - 1
        ):
            ckpt_path = out_dir / "model.ckpt"
            model.save(ckpt_path, step=step + 1, seed=cfg.seed, optimizer_state=optimizer.state_dict())

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "loss_log.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "loss", "alignment_fraction"])
            writer.writerows(log_rows)

    return TrainResult(
        model=model,
        checkpoint_path=ckpt_path,
        losses=losses,
        realized_mix=align_count / max(sample_count, 1),
        wall_seconds=time.perf_counter() - t_start,
    )
