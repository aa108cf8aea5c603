"""Shared fixtures: tiny model configs and synthetic window builders."""

import numpy as np
import pytest

from loadcast.forecaster import Forecaster, ModelConfig


@pytest.fixture
def tiny_config():
    return ModelConfig(input_width=4, lift_width=5, hidden_width=4, latent_width=3,
                       context_steps=3, source_names=("a", "b"), source_dim=2,
                       gate_hidden=3, hyper_hidden=3)


@pytest.fixture
def tiny_model(tiny_config):
    model = Forecaster(tiny_config, np.random.default_rng(11))
    model.set_trainable(True)
    return model


class FakeWindow:
    """Bare window triple for model-level tests."""

    def __init__(self, context_loads, context_externals, target_loads):
        self.context_loads = np.asarray(context_loads, dtype=np.float64)
        self.context_externals = np.asarray(context_externals, dtype=np.float64)
        self.target_loads = np.asarray(target_loads, dtype=np.float64)


def random_window(config: ModelConfig, rng: np.random.Generator) -> FakeWindow:
    steps, d = config.context_steps, config.input_width
    return FakeWindow(
        rng.normal(size=(steps, d)),
        rng.normal(size=(steps, len(config.source_names), config.source_dim)),
        rng.normal(size=d),
    )


def randomize_hypernets(model: Forecaster, rng: np.random.Generator, scale=0.3):
    """Break the zero-init of hypernet output layers for gradient tests."""
    for name, p in model.parameters().items():
        if "hyper" in name and ("w2" in name or "b2" in name):
            p.data = rng.normal(0.0, scale, p.data.shape)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
