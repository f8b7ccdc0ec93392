"""Tests for Recall@k, NDCG@k and table evaluation"""

from math import log2

import numpy as np
import pytest

from src.core.metrics import evaluate_tables, ndcg_at_k, recall_at_k
from src.core.server import EgoRegistry, ItemTable
from src.schema import Dataset, Interaction, LedgerRow

pytestmark = pytest.mark.unit


class TestRecall:
    def test_basic(self):
        assert recall_at_k([3, 1, 7], {1, 9}, 3) == 0.5

    def test_cutoff(self):
        assert recall_at_k([3, 1, 7], {7}, 2) == 0.0

    def test_all_hit(self):
        assert recall_at_k([4, 5], {4, 5}, 2) == 1.0

    @pytest.mark.parametrize("k", [0, -2])
    def test_bad_k(self, k):
        with pytest.raises(ValueError):
            recall_at_k([1], {1}, k)

    def test_empty_relevant(self):
        with pytest.raises(ValueError):
            recall_at_k([1], set(), 1)


class TestNdcg:
    def test_hit_at_top(self):
        assert ndcg_at_k([2, 5, 8], {2}, 3) == 1.0

    def test_hit_at_second(self):
        assert ndcg_at_k([5, 2, 8], {2}, 3) == pytest.approx(1.0 / log2(3))

    def test_two_relevant(self):
        expected = (1.0 + 1.0 / log2(4)) / (1.0 + 1.0 / log2(3))
        assert ndcg_at_k([1, 9, 3], {1, 3}, 3) == pytest.approx(expected)

    def test_miss(self):
        assert ndcg_at_k([5, 6], {1}, 2) == 0.0

    def test_matches_brute_force(self, np_rng):
        for _ in range(50):
            ranked = np_rng.permutation(20)[:10].tolist()
            relevant = set(np_rng.choice(20, size=int(np_rng.integers(1, 6)), replace=False).tolist())
            k = int(np_rng.integers(1, 11))
            gains = [1.0 if item in relevant else 0.0 for item in ranked[:k]]
            dcg = sum(g / np.log2(p + 2) for p, g in enumerate(gains))
            ideal = sorted([1.0] * len(relevant) + [0.0] * k, reverse=True)[:k]
            idcg = sum(g / np.log2(p + 2) for p, g in enumerate(ideal))
            assert ndcg_at_k(ranked, relevant, k) == pytest.approx(dcg / idcg)

def _brute_recall(ranked: list[int], relevant: set[int], k: int) -> float:
    top = ranked[:k]
    return len([item for item in relevant if item in top]) / len(relevant)


def _brute_ndcg(ranked: list[int], relevant: set[int], k: int) -> float:
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    gains = np.array([item in relevant for item in ranked[:k]] + [False] * (k - len(ranked[:k])), dtype=float)
    ideal = np.zeros(k)
    ideal[: min(k, len(relevant))] = 1.0
    return float(gains @ discounts) / float(ideal @ discounts)


@pytest.mark.slow
def test_random_rankings_match_brute_force():
    gen = np.random.default_rng(31)
    for _ in range(1000):
        catalog = int(gen.integers(5, 300))
        ranked = gen.permutation(catalog)[: int(gen.integers(1, catalog + 1))].tolist()
        relevant = set(gen.choice(catalog, size=int(gen.integers(1, min(catalog, 30) + 1)), replace=False).tolist())
        k = int(gen.integers(1, 51))
        assert abs(recall_at_k(ranked, relevant, k) - _brute_recall(ranked, relevant, k)) <= 1e-12
        assert abs(ndcg_at_k(ranked, relevant, k) - _brute_ndcg(ranked, relevant, k)) <= 1e-12



def _dataset() -> Dataset:
    return Dataset(
        num_users=3,
        num_items=4,
        train=(Interaction(0, 0), Interaction(1, 1), Interaction(2, 2)),
        valid=(Interaction(0, 3),),
        test=(Interaction(0, 1), Interaction(1, 0), Interaction(2, 3)),
        user_ids=(10, 11, 12),
        item_ids=(20, 21, 22, 23),
    )


class TestEvaluateTables:
    def _tables(self):
        registry = EgoRegistry.empty(3, 2)
        registry.update(0, np.array([1.0, 0.0]), 0)
        registry.update(1, np.array([0.0, 1.0]), 0)
        # item scores for user 0: 5, 4, 0, 1 -> train item 0 is excluded
        table = ItemTable(embeddings=np.array([[5.0, 0.0], [4.0, 1.0], [0.0, 3.0], [1.0, 2.0]]))
        return registry, table

    def test_train_items_excluded(self):
        registry, table = self._tables()
        report = evaluate_tables(_dataset(), registry, table, k=1)
        # user 0 ranks item 1 first (hit); user 1 ranks item 2 first (miss)
        assert report.recall_at_k == 0.5
        assert report.ndcg_at_k == 0.5
        assert report.num_users == 2

    def test_missing_users_skipped(self):
        registry, table = self._tables()
        report = evaluate_tables(_dataset(), registry, table, k=2)
        assert report.skipped_users == 1

    def test_valid_split(self):
        registry, table = self._tables()
        report = evaluate_tables(_dataset(), registry, table, k=2, split="valid")
        assert report.num_users == 1
        assert report.recall_at_k == 1.0

    def test_report_row(self):
        registry, table = self._tables()
        comm = LedgerRow(round=3, uplink=10, downlink=20, d2d=30)
        report = evaluate_tables(_dataset(), registry, table, k=2, round_index=3, comm=comm, mean_loss=0.7)
        row = report.to_row()
        assert row["round"] == 3
        assert row["mean_loss"] == 0.7
        assert (row["uplink"], row["downlink"], row["d2d"]) == (10, 20, 30)

    def test_bad_split(self):
        registry, table = self._tables()
        with pytest.raises(ValueError):
            evaluate_tables(_dataset(), registry, table, k=2, split="train")

    def test_empty_registry(self):
        _, table = self._tables()
        report = evaluate_tables(_dataset(), EgoRegistry.empty(3, 2), table, k=2)
        assert report.recall_at_k == 0.0
        assert report.skipped_users == 3
