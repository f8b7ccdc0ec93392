"""Shared fixtures"""

from typing import Callable

import numpy as np
import pytest

from src.core.embeddings import RngStream
from src.core.propagation import GroupGraph, Node
from src.federation.simulation import load_dataset
from src.schema import Dataset, ExperimentConfig


@pytest.fixture
def rng() -> RngStream:
    return RngStream(7, "test")


@pytest.fixture
def np_rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    """12 users, 40 items, 2 communities; 16 train / 1 valid / 1 test per user"""
    return ExperimentConfig(
        dataset_format="synthetic",
        synthetic_users=12,
        synthetic_items=40,
        synthetic_communities=2,
        synthetic_train_per_user=16,
        embedding_dim=4,
        layers=2,
        groups=2,
        fake_items=1,
        rounds=2,
        local_epochs=1,
        fcm_max_iters=20,
        k=5,
        seed=3,
    )


@pytest.fixture
def tiny_dataset(tiny_config: ExperimentConfig) -> Dataset:
    return load_dataset(tiny_config)


def random_group(
    gen: np.random.Generator,
    dim: int = 3,
    max_users: int = 4,
    max_items: int = 5,
    catalog: int = 8,
    max_fake: int = 3,
) -> tuple[GroupGraph, dict[Node, np.ndarray]]:
    """Random group graph with Gaussian layer-0 embeddings for every node"""
    num_users = int(gen.integers(1, max_users + 1))
    user_ids = sorted(gen.choice(100, size=num_users, replace=False).tolist())
    members = []
    for u in user_ids:
        n = int(gen.integers(1, max_items + 1))
        members.append((u, tuple(sorted(gen.choice(catalog, size=n, replace=False).tolist()))))
    num_fake = int(gen.integers(0, max_fake + 1))
    fake_items = tuple(sorted(gen.choice(catalog, size=num_fake, replace=False).tolist()))

    gg = GroupGraph(members=members, fake_items=fake_items)
    init = {node: gen.normal(size=dim) for node in gg.nodes()}
    return gg, init


@pytest.fixture
def make_group(np_rng: np.random.Generator) -> Callable[..., tuple[GroupGraph, dict[Node, np.ndarray]]]:
    def factory(**kwargs):
        return random_group(np_rng, **kwargs)

    return factory
