"""The unified refiner model: vision encoder + conditional denoiser U-Net.

Both inference stages share these weights. Checkpoints are single files in
the named-tensor format of :mod:`refalign.serialize`; scalar metadata
(step, seed, config hash, config JSON) rides along as small tensors so a
checkpoint is self-describing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffusion import DenoiserConfig, NoiseSchedule, UNet
from .encoder import EncoderConfig, VisionEncoder
from .errors import DataError, ModelError
from .rng import Rng
from .serialize import load_checkpoint, save_checkpoint
from .tensor import Module


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.T, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def __post_init__(self):
        if self.encoder.d_tok != self.denoiser.d_tok:
            raise DataError(
                f"encoder d_tok {self.encoder.d_tok} != denoiser d_tok {self.denoiser.d_tok}"
            )
        if self.encoder.image_size != self.denoiser.image_size:
            raise DataError("encoder and denoiser must share the working resolution")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        den = raw["denoiser"]
        den["channel_mults"] = tuple(den["channel_mults"])
        den["xattn_levels"] = tuple(den["xattn_levels"])
        return cls(
            encoder=EncoderConfig(**raw["encoder"]),
            denoiser=DenoiserConfig(**den),
            schedule=ScheduleConfig(**raw["schedule"]),
        )

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def _encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def _decode_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")


class RefinerModel(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.cfg = cfg
        self.encoder = VisionEncoder(cfg.encoder, rng.child(1))
        self.unet = UNet(cfg.denoiser, rng.child(2))
        self._schedule = cfg.schedule.build()

    # non-parameter attributes must be skipped by the Module scan
    def named_parameters(self, prefix: str = ""):
        for sub, name in ((self.encoder, "encoder"), (self.unet, "unet")):
            full = f"{prefix}.{name}" if prefix else name
            yield from sub.named_parameters(full)

    @property
    def schedule(self) -> NoiseSchedule:
        return self._schedule

    @property
    def token_grid(self) -> tuple[int, int]:
        return self.cfg.encoder.grid

    def check_finite(self) -> None:
        for name, p in self.named_parameters():
            if not np.all(np.isfinite(p.data)):
                raise ModelError(f"parameter {name} contains non-finite values")

    def save(self, path, step: int = 0, seed: int = 0, optimizer_state: dict | None = None) -> None:
        tensors: dict[str, np.ndarray] = {
            "__meta__.config_json": _encode_text(self.cfg.to_json()),
            "__meta__.config_sha": _encode_text(self.cfg.hash()),
            "__meta__.step": np.array([step], np.float32),
            "__meta__.seed": np.array(
                [(seed >> 48) & 0xFFFF, (seed >> 32) & 0xFFFF, (seed >> 16) & 0xFFFF, seed & 0xFFFF],
                np.float32,
            ),
        }
        for name, p in self.named_parameters():
            tensors[f"param.{name}"] = p.data
        if optimizer_state:
            for name, arr in optimizer_state.items():
                tensors[f"optim.{name}"] = arr
        save_checkpoint(path, tensors)

    @classmethod
    def load(cls, path) -> tuple["RefinerModel", dict]:
        tensors = load_checkpoint(path)
        if "__meta__.config_json" not in tensors:
            raise DataError(f"{path} is not a refiner checkpoint")
        cfg = ModelConfig.from_json(_decode_text(tensors["__meta__.config_json"]))
        model = cls(cfg, Rng(0))
        params = {
            name[len("param.") :]: arr for name, arr in tensors.items() if name.startswith("param.")
        }
        model.load_state_dict(params)
        seed_parts = tensors["__meta__.seed"].astype(np.uint64)
        seed = int((seed_parts[0] << 48) | (seed_parts[1] << 32) | (seed_parts[2] << 16) | seed_parts[3])
        meta = {
            "step": int(tensors["__meta__.step"][0]),
            "seed": seed,
            "config_sha": _decode_text(tensors["__meta__.config_sha"]),
            "optimizer_state": {
                name[len("optim.") :]: arr for name, arr in tensors.items() if name.startswith("optim.")
            },
        }
        return model, meta
