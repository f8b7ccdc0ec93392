"""Fixtures for end-to-end runs"""

from pathlib import Path

import pytest
import structlog

TINY_CONFIG = """\
[run]
dataset_format=synthetic
synthetic_users=12
synthetic_items=40
synthetic_communities=2
synthetic_train_per_user=16
embedding_dim=4
layers=2
groups=2
fake_items=1
rounds=2
local_epochs=1
fcm_max_iters=20
k=5
seed=3
"""


@pytest.fixture(autouse=True)
def reset_logging():
    """CLI invocations reconfigure structlog onto the runner's streams"""
    yield
    structlog.reset_defaults()


@pytest.fixture
def tiny_config_file(tmp_path: Path) -> Path:
    path = tmp_path / "tiny.conf"
    path.write_text(TINY_CONFIG)
    return path
