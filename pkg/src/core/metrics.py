"""
Ranking Metrics

Offline, omniscient evaluation of the server's ranking against held-out
interactions. Evaluation reads the item table and ego registry only; it
never touches devices or the message bus.
"""

from math import log2
from typing import Optional

import numpy as np
import structlog

from src.core.server import EgoRegistry, ItemTable, rank_topk
from src.schema import Dataset, LedgerRow, MetricsReport

logger = structlog.get_logger(__name__)


def _check(relevant: set, k: int) -> None:
    if k < 1:
        raise ValueError(f"k must be >= 1: {k}")
    if not relevant:
        raise ValueError("relevant set is empty")


def recall_at_k(ranked: list[int], relevant: set[int], k: int) -> float:
    """|top-k ∩ relevant| / |relevant|"""
    _check(relevant, k)
    hits = sum(1 for item in ranked[:k] if item in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked: list[int], relevant: set[int], k: int) -> float:
    """Binary-relevance NDCG with 1-based positions and log2(p + 1) discount"""
    _check(relevant, k)
    dcg = sum(1.0 / log2(p + 1) for p, item in enumerate(ranked[:k], start=1) if item in relevant)
    idcg = sum(1.0 / log2(p + 1) for p in range(1, min(k, len(relevant)) + 1))
    return dcg / idcg


def evaluate_tables(
    dataset: Dataset,
    registry: EgoRegistry,
    table: ItemTable,
    k: int,
    split: str = "test",
    round_index: int = 0,
    comm: Optional[LedgerRow] = None,
    mean_loss: Optional[float] = None,
) -> MetricsReport:
    """
    Recall@k and NDCG@k averaged over users with held-out items.

    Candidates for a user are all items minus that user's train items.
    Users missing from the registry are skipped and counted.

    Args:
        dataset: Dataset with the held-out split
        registry: Ego registry
        table: Item table
        k: Cut-off
        split: "test" or "valid"
        round_index: Round stamped on the report
        comm: Ledger row stamped on the report
        mean_loss: Loss stamped on the report

    Returns:
        MetricsReport
    """
    if split not in ("test", "valid"):
        raise ValueError(f"split must be 'test' or 'valid': {split}")

    train_items = dataset.items_by_user("train")
    held_out = dataset.items_by_user(split)

    recalls: list[float] = []
    ndcgs: list[float] = []
    skipped = 0
    for user_id in sorted(held_out):
        if user_id not in registry:
            skipped += 1
            continue
        relevant = set(held_out[user_id])
        ranked = rank_topk(registry, table, user_id, k, exclude=train_items.get(user_id, ()))
        recalls.append(recall_at_k(ranked, relevant, k))
        ndcgs.append(ndcg_at_k(ranked, relevant, k))

    if skipped:
        logger.warning("Users missing from registry skipped", split=split, skipped=skipped)

    # fixed ascending-user reduction order
    recall = float(np.add.reduce(np.asarray(recalls, dtype=np.float64))) / len(recalls) if recalls else 0.0
    ndcg = float(np.add.reduce(np.asarray(ndcgs, dtype=np.float64))) / len(ndcgs) if ndcgs else 0.0

    return MetricsReport(
        round=round_index,
        k=k,
        recall_at_k=recall,
        ndcg_at_k=ndcg,
        mean_loss=mean_loss,
        comm=comm if comm is not None else LedgerRow(round=round_index),
        num_users=len(recalls),
        skipped_users=skipped,
    )


def evaluate(world, k: int, split: str = "test") -> MetricsReport:
    """Evaluate a simulation world's current server state"""
    return evaluate_tables(
        world.dataset,
        world.server.registry,
        world.server.table,
        k,
        split=split,
        round_index=world.round,
        comm=world.bus.ledger.row(world.round),
        mean_loss=world.last_mean_loss,
    )
