"""
Shared fixtures: tiny link dimensions that keep codec tests fast.
"""

import numpy as np
import pytest

from src.models import LIFConfig, ModelConfig, SystemConfig, TrainConfig


@pytest.fixture
def tiny_system():
    """N_s = N_t = 8, M = 16, T = 3."""
    return SystemConfig(n_t=8, n_c=16, n_s=8, cr=8, t_steps=3)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(hidden_width=64, lif=LIFConfig())


@pytest.fixture
def tiny_train_cfg():
    return TrainConfig(
        learning_rate=0.002,
        epochs=3,
        batch_size=8,
        alpha=0.5,
        seed=7,
        augment=True,
        augment_k=16,
        lambda_subset_batches=2,
    )


@pytest.fixture
def tiny_planes(tiny_system):
    rng = np.random.default_rng(11)
    shape = (24, 2, tiny_system.n_s, tiny_system.n_t)
    return rng.uniform(-5, 5, size=shape).astype(np.float32)
