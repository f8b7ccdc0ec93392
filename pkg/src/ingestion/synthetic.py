"""
Synthetic Block-Community Dataset

Users are split into communities; each community prefers one contiguous
block of items. Every user interacts mostly inside its block and a little
outside it, so co-clustering has real structure to find.
"""

from typing import Optional

import numpy as np
import structlog

from src.core.embeddings import RngStream
from src.ingestion.interactions import filter_and_split, split_counts
from src.schema import Dataset, Interaction

logger = structlog.get_logger(__name__)

OUT_OF_BLOCK_RATE = 0.1


def interactions_for_train_count(train_per_user: int, ratios: tuple[float, float, float]) -> int:
    """Smallest per-user total whose train share is exactly train_per_user"""
    total = train_per_user
    while split_counts(total, ratios)[0] < train_per_user:
        total += 1
    if split_counts(total, ratios)[0] != train_per_user:
        raise ValueError(f"No total yields exactly {train_per_user} train items under {ratios}")
    return total


def item_block(community: int, num_items: int, communities: int) -> np.ndarray:
    """Item ids preferred by one community"""
    bounds = np.linspace(0, num_items, communities + 1).astype(int)
    return np.arange(bounds[community], bounds[community + 1])


def make_block_interactions(
    num_users: int,
    num_items: int,
    communities: int,
    per_user: int,
    seed: int,
    out_of_block_rate: float = OUT_OF_BLOCK_RATE,
) -> list[Interaction]:
    """
    Draw per_user distinct items for every user.

    User u belongs to community u % communities.
    """
    if communities < 1 or communities > num_items:
        raise ValueError(f"communities must lie in [1, {num_items}]: {communities}")
    if per_user > num_items:
        raise ValueError(f"per_user ({per_user}) exceeds num_items ({num_items})")

    all_items = np.arange(num_items)
    rows: list[Interaction] = []
    for u in range(num_users):
        rng = RngStream(seed, f"synthetic:{u}")
        block = item_block(u % communities, num_items, communities)
        outside = np.setdiff1d(all_items, block)

        n_out = int(round(out_of_block_rate * per_user))
        n_in = min(per_user - n_out, len(block))
        n_out = min(per_user - n_in, len(outside))
        chosen = np.concatenate([rng.choice(block, n_in), rng.choice(outside, n_out)])
        rows += [Interaction(user_id=u, item_id=int(i)) for i in np.sort(chosen)]
    return rows


def make_block_dataset(
    num_users: int = 500,
    num_items: int = 300,
    communities: int = 5,
    train_per_user: int = 30,
    seed: int = 0,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    out_of_block_rate: Optional[float] = None,
) -> Dataset:
    """
    Block-community corpus split per user.

    Args:
        num_users: N
        num_items: M
        communities: Number of user communities / item blocks
        train_per_user: Exact train interactions per user
        seed: Master seed
        ratios: (train, valid, test)
        out_of_block_rate: Share of interactions outside the user's block

    Returns:
        Dataset; items nobody drew are absent from the catalog
    """
    per_user = interactions_for_train_count(train_per_user, ratios)
    rate = OUT_OF_BLOCK_RATE if out_of_block_rate is None else out_of_block_rate
    raw = make_block_interactions(num_users, num_items, communities, per_user, seed, rate)

    logger.info(
        "Synthetic corpus generated",
        users=num_users,
        items=num_items,
        communities=communities,
        per_user=per_user,
    )
    return filter_and_split(raw, min_interactions=1, ratios=ratios, seed=seed)
