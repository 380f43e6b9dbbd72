import numpy as np
import pytest

from choreo.config import DEFAULT_CONFIG, ModelConfig
from choreo.model import init_weights

# small_config keeps unit tests quick; acceptance runs at DEFAULT_CONFIG
SMALL_CONFIG = ModelConfig(n_layers=2, n_heads=2, head_dim=8, ffn_dim=64,
                           vocab_size=512, context_window=256, seed=0)


@pytest.fixture(scope="session")
def small_config() -> ModelConfig:
    return SMALL_CONFIG


@pytest.fixture(scope="session")
def small_weights():
    return init_weights(SMALL_CONFIG)


@pytest.fixture(scope="session")
def default_weights():
    return init_weights(DEFAULT_CONFIG)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
