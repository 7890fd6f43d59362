from __future__ import annotations

import numpy as np
import pytest
import torch

from geovln.model import GeoVLNAgent, ModelConfig
from geovln.slot_fusion import LsaConfig
from geovln.world import FeatureSpec, generate_world, sample_episodes

torch.set_num_threads(1)

TINY_FEATURES = FeatureSpec(dim=8, n_landmarks=6)


def tiny_config(**overrides) -> ModelConfig:
    lsa = overrides.pop("lsa", LsaConfig(iterations=2, dropout=0.0))
    base = dict(
        feature_dim=8,
        angle_repeat=2,
        d_h=16,
        heads=2,
        state_layers=1,
        lang_layers=1,
        n_landmarks=6,
        dropout=0.0,
        lsa=lsa,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_agent(dtype=torch.float64, **overrides) -> GeoVLNAgent:
    return GeoVLNAgent(tiny_config(**overrides)).to(dtype)


@pytest.fixture(scope="session")
def world20():
    return generate_world(20, seed=3)


@pytest.fixture(scope="session")
def tiny_world():
    return generate_world(12, seed=5, features=TINY_FEATURES)


@pytest.fixture(scope="session")
def tiny_episodes(tiny_world):
    return sample_episodes(tiny_world, 6, np.random.default_rng(0), min_hops=1, max_hops=4, min_distance=0.0)
