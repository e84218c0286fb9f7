"""Reference-guided artifact refinement with cross-attention alignment."""

from .alignment import (
    CorrespondenceMap,
    CorrespondenceRegion,
    GridSearchTable,
    PostprocessParams,
    aggregate,
    align_single,
    grid_search,
    miou,
    postprocess,
    resize_mask,
)
from .diffusion import (
    AttentionRecord,
    AttentionRecorder,
    DenoiserConfig,
    DenoiserInput,
    NoiseSchedule,
    denoise_step,
    forward_diffuse,
    sample,
)
from .encoder import EncoderConfig, ReferenceTokens, VisionEncoder, mask_tokens
from .errors import (
    DataError,
    EmptyRegionError,
    ModelError,
    NumericError,
    PlacementError,
    RefalignError,
    ShapeError,
)
from .model import ModelConfig, RefinerModel, ScheduleConfig
from .pipeline import RefineConfig, RefineResult, evaluate, identity_score, refine
from .rng import Rng
from .tensor import Tensor, no_grad
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AttentionRecord",
    "AttentionRecorder",
    "CorrespondenceMap",
    "CorrespondenceRegion",
    "DataError",
    "DenoiserConfig",
    "DenoiserInput",
    "EmptyRegionError",
    "EncoderConfig",
    "GridSearchTable",
    "ModelConfig",
    "ModelError",
    "NoiseSchedule",
    "NumericError",
    "PlacementError",
    "PostprocessParams",
    "RefalignError",
    "ReferenceTokens",
    "RefineConfig",
    "RefineResult",
    "RefinerModel",
    "Rng",
    "ScheduleConfig",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "VisionEncoder",
    "aggregate",
    "align_single",
    "denoise_step",
    "evaluate",
    "forward_diffuse",
    "grid_search",
    "identity_score",
    "mask_tokens",
    "miou",
    "no_grad",
    "postprocess",
    "refine",
    "resize_mask",
    "sample",
    "train",
]
