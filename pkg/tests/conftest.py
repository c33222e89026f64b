"""Shared fixtures: a tiny desk configuration and a generated sequence/dataset."""

import numpy as np
import pytest
import torch

from config import SimConfig, load_config
from core.synthworld import generate_dataset, generate_sequence

TINY_OVERRIDES = (
    "world.cloth_grid=[4,3]",
    "world.rope_particles=6",
    "world.frames=10",
    "world.sequences=3",
    "world.table_points=60",
    "cameras.width=16",
    "cameras.height=16",
    "dynamics.embed_dim=8",
    "dynamics.num_layers=1",
    "dynamics.knn=3",
    "hierarchy.kmeans_inits=2",
    "hierarchy.kmeans_iters=20",
    "train.stride=2",
    "train.window_multiplier=2",
    "train.stage1_epochs=1",
    "train.stage2_epochs=1",
    "eval.grid_frames=3",
)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run end-to-end tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_config(*extra: str) -> SimConfig:
    return load_config(None, TINY_OVERRIDES + tuple(extra))


@pytest.fixture(autouse=True)
def _no_env_seed(monkeypatch):
    monkeypatch.delenv("SOMA_SEED", raising=False)


@pytest.fixture
def tiny_cfg() -> SimConfig:
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_sequence():
    torch.manual_seed(0)
    return generate_sequence(tiny_config(), 7, "seq_test", "lift", "cloth")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    generate_dataset(tiny_config(), root, 3, "drag", "cloth")
    return root


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def cfg_factory():
    """Tiny config with extra ``section.key=value`` overrides."""
    return tiny_config
