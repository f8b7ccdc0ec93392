"""Learning signal on the block-community corpus (slow, several minutes)"""

from pathlib import Path

import numpy as np
import pytest

from src.federation.simulation import Experiment, load_dataset
from src.schema import Dataset, ExperimentConfig, load_config

pytestmark = [pytest.mark.integration, pytest.mark.slow]

ACCEPTANCE_CONFIG = Path(__file__).resolve().parents[2] / "configs" / "synthetic_acceptance.conf"
SEEDS = (0, 1, 2, 3, 4)


def random_recall(dataset: Dataset, k: int) -> float:
    """Expected Recall@k of a uniformly random ranking over non-train items"""
    train = dataset.items_by_user("train")
    test = dataset.items_by_user("test")
    expectations = [
        min(k, dataset.num_items - len(train.get(u, ()))) / (dataset.num_items - len(train.get(u, ())))
        for u in sorted(test)
    ]
    return float(np.mean(expectations))


def _first_and_last(config: ExperimentConfig, dataset: Dataset) -> tuple[float, float]:
    reports = list(Experiment(config, dataset=dataset, threads=1).run())
    assert reports[-1].round == config.rounds
    return reports[0].recall_at_k, reports[-1].recall_at_k


@pytest.fixture(scope="module")
def acceptance_runs() -> dict:
    """seed -> (random expectation, {fake_items: (round-0 recall, last recall)})"""
    base = load_config(ACCEPTANCE_CONFIG)
    runs = {}
    for seed in SEEDS:
        config = base.model_copy(update={"seed": seed})
        dataset = load_dataset(config)
        by_fake = {
            fake_items: _first_and_last(config.model_copy(update={"fake_items": fake_items}), dataset)
            for fake_items in (0, 1)
        }
        runs[seed] = (random_recall(dataset, config.k), by_fake)
    return runs


def test_acceptance_config_shape():
    config = load_config(ACCEPTANCE_CONFIG)
    assert (config.synthetic_users, config.synthetic_items) == (500, 300)
    assert (config.synthetic_communities, config.synthetic_train_per_user) == (5, 30)
    assert (config.rounds, config.k, config.fake_items) == (20, 20, 1)


def test_training_improves_ranking(acceptance_runs):
    for seed, (expected, by_fake) in acceptance_runs.items():
        first, last = by_fake[1]
        assert last - first >= 3 * expected, (seed, first, last, expected)


def test_fake_items_help(acceptance_runs):
    with_fake = np.array([by_fake[1][1] for _, by_fake in acceptance_runs.values()])
    without = np.array([by_fake[0][1] for _, by_fake in acceptance_runs.values()])
    assert int(np.sum(with_fake > without)) >= 4, (with_fake, without)
    assert with_fake.mean() > without.mean()
