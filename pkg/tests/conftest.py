import numpy as np
import pytest

from refalign.diffusion import DenoiserConfig
from refalign.encoder import EncoderConfig
from refalign.model import ModelConfig, RefinerModel, ScheduleConfig
from refalign.rng import Rng
from refalign.tensor import set_finite_checks


@pytest.fixture(autouse=True, scope="session")
def finite_checks():
    set_finite_checks(True)
    yield
    set_finite_checks(False)


def small_model_config() -> ModelConfig:
    """Full-resolution geometry with slim widths: fast forwards for contract tests."""
    return ModelConfig(
        encoder=EncoderConfig(image_size=64, patch_size=8, d_tok=64, n_layers=1, n_heads=4),
        denoiser=DenoiserConfig(base_channels=16, channel_mults=(1, 2, 2), d_tok=64),
        schedule=ScheduleConfig(T=50),
    )


def mini_model_config() -> ModelConfig:
    """8x8 images, 4 tokens: small enough for finite-difference sweeps."""
    return ModelConfig(
        encoder=EncoderConfig(image_size=8, patch_size=4, d_tok=8, n_layers=1, n_heads=2),
        denoiser=DenoiserConfig(
            image_size=8, base_channels=8, channel_mults=(1,), xattn_levels=(4,),
            d_tok=8, n_heads=2, t_dim=16, groups=4,
        ),
        schedule=ScheduleConfig(T=10),
    )


@pytest.fixture(scope="session")
def small_model() -> RefinerModel:
    return RefinerModel(small_model_config(), Rng(1234))


@pytest.fixture(scope="session")
def mini_model() -> RefinerModel:
    return RefinerModel(mini_model_config(), Rng(99))


@pytest.fixture()
def rng() -> Rng:
    return Rng(2024)


@pytest.fixture(scope="session")
def bench_cases():
    from refalign.data import gen_benchmark

    return gen_benchmark(4, Rng(77))


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / (np.abs(a) + np.abs(b) + 1e-8)))
