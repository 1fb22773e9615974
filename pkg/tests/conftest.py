import numpy as np
import pytest
import torch

from stitchkit.config import FusionConfig
from stitchkit.synth_envs import EnvSpec, collect_dataset

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def chain_pair():
    spec = EnvSpec(family="chain_discrete", horizon=8, n_states=6, seed=3)
    tar = collect_dataset(spec, "medium", 64, "target", seed=3)
    src = collect_dataset(spec.with_shift(1.0), "expert", 96, "source", seed=4)
    return tar, src


@pytest.fixture(scope="session")
def point_pair():
    spec = EnvSpec(horizon=20, noise_std=0.01, seed=5)
    tar = collect_dataset(spec.with_shift(3.0), "medium", 120, "target", seed=5)
    src = collect_dataset(spec, "expert", 200, "source", seed=6)
    return tar, src


@pytest.fixture
def toy_cfg():
    return FusionConfig(context=3, hidden=8, embed_dim=8, n_layers=1, n_heads=1, batch_size=12,
                        value_steps=20, command_steps=20, train_steps=5, bc_steps=5, dropout=0.0,
                        checkpoint_every=1000)
