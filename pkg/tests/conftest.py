# tests/conftest.py

import numpy as np
import pytest

from single_stream import GatedLoRA, ModelConfig, SingleStreamModel
from tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Мінімальна конфігурація: швидкі прямі проходи для перевірок скінченними різницями."""
    return ModelConfig(d_model=8, n_heads=2, n_layers=2, n_I=3, n_T=3, d_data=2, n_concepts=2, time_embed_dim=4)


@pytest.fixture
def tiny_model(tiny_config):
    return SingleStreamModel.init(tiny_config, seed=3)


@pytest.fixture
def frozen(tiny_model):
    return tiny_model.frozen()


def random_lora(config: ModelConfig, seed: int, rank: int = 2, gated: bool = True, std: float = 0.3) -> GatedLoRA:
    """LoRA з ненульовими обома факторами (на відміну від init, де up = 0)."""
    lora = GatedLoRA.init(config, rank=rank, seed=seed, gated=gated, init_std=std)
    gen = np.random.default_rng([seed, 99])
    for key, (down, up) in lora.factors.items():
        lora.factors[key] = (down, Tensor(gen.normal(0.0, std, up.shape), requires_grad=True, name=up.name))
    return lora


@pytest.fixture
def lora(tiny_config):
    return random_lora(tiny_config, seed=5)
