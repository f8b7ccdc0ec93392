"""
Interaction Dataset Ingestion

Reads implicit-feedback interaction files, filters them to a k-core,
remaps ids densely, splits train/valid/test and builds per-user ego graphs.

Supported formats:
    - movielens-dat: user::item::rating::timestamp
    - tsv: user<TAB>item[<TAB>timestamp]

Every rating counts as a positive interaction.
"""

from collections import Counter
from pathlib import Path
from typing import Iterable, Union

import structlog

from src.core.embeddings import RngStream
from src.errors import EmptyDatasetError, ParseError
from src.schema import Dataset, EgoGraph, Interaction

logger = structlog.get_logger(__name__)

FORMATS = ("movielens-dat", "tsv")
ITEMS_MARKER = "#items"

# Guards floor() against representation error (0.1 * 10 = 0.9999...)
_FLOOR_EPS = 1e-9


# =============================================================================
# Parsing
# =============================================================================


class InteractionReader:
    """Line-oriented reader for one interaction file format"""

    def __init__(self, format: str = "movielens-dat"):
        """
        Initialize the reader.

        Args:
            format: "movielens-dat" or "tsv"
        """
        if format not in FORMATS:
            raise ValueError(f"Unknown dataset format {format!r}; expected one of {FORMATS}")
        self.format = format

    def parse_line(self, path: str, line_number: int, line: str) -> Interaction:
        """Parse one non-blank line; raise ParseError naming the line"""
        if self.format == "movielens-dat":
            fields = line.split("::")
            if len(fields) != 4:
                raise ParseError(path, line_number, line, "expected 4 '::'-separated fields")
            user, item, rating, timestamp = fields
            try:
                float(rating)
            except ValueError:
                raise ParseError(path, line_number, line, f"rating {rating!r} is not a number")
        else:
            fields = line.split("\t")
            if len(fields) not in (2, 3):
                raise ParseError(path, line_number, line, "expected 2 or 3 tab-separated fields")
            user, item = fields[0], fields[1]
            timestamp = fields[2] if len(fields) == 3 else None

        try:
            user_id = int(user)
            item_id = int(item)
            ts = int(timestamp) if timestamp not in (None, "") else None
        except ValueError:
            raise ParseError(path, line_number, line, "ids and timestamp must be integers")
        if user_id < 0 or item_id < 0:
            raise ParseError(path, line_number, line, "ids must be non-negative")
        return Interaction(user_id=user_id, item_id=item_id, timestamp=ts)

    def read(self, path: Union[str, Path]) -> list[Interaction]:
        """
        Read and deduplicate a file.

        Args:
            path: Interaction file

        Returns:
            Interactions in file order; repeated (user, item) pairs keep the
            first occurrence
        """
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Dataset file not found: {path}")

        interactions: list[Interaction] = []
        seen: set[tuple[int, int]] = set()
        duplicates = 0
        with open(path, encoding="utf-8", errors="replace") as f:
            for line_number, raw in enumerate(f, start=1):
                line = raw.rstrip("\r\n")
                if not line.strip():
                    continue
                inter = self.parse_line(str(path), line_number, line)
                if inter.pair in seen:
                    duplicates += 1
                    continue
                seen.add(inter.pair)
                interactions.append(inter)

        if not interactions:
            raise EmptyDatasetError(f"No interactions in {path}")

        logger.info(
            "Dataset ingested",
            path=str(path),
            format=self.format,
            interactions=len(interactions),
            duplicates=duplicates,
        )
        return interactions


def ingest(path: Union[str, Path], format: str = "movielens-dat") -> list[Interaction]:
    """Read an interaction file (see InteractionReader.read)"""
    return InteractionReader(format).read(path)


# =============================================================================
# Filtering and Splitting
# =============================================================================


def kcore_filter(raw: Iterable[Interaction], min_interactions: int) -> list[Interaction]:
    """
    Iteratively drop users and items with fewer than min_interactions
    interactions until nothing changes.
    """
    if min_interactions < 1:
        raise ValueError(f"min_interactions must be >= 1: {min_interactions}")

    current = list(raw)
    passes = 0
    while True:
        passes += 1
        user_counts = Counter(inter.user_id for inter in current)
        item_counts = Counter(inter.item_id for inter in current)
        kept = [
            inter
            for inter in current
            if user_counts[inter.user_id] >= min_interactions
            and item_counts[inter.item_id] >= min_interactions
        ]
        if len(kept) == len(current):
            break
        current = kept

    logger.debug("k-core filter reached fixed point", passes=passes, interactions=len(current))
    return current


def split_counts(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    n_valid = int(ratios[1] * n + _FLOOR_EPS)
    n_test = int(ratios[2] * n + _FLOOR_EPS)
    return n - n_valid - n_test, n_valid, n_test


def _split_per_user(
    interactions: list[Interaction], ratios: tuple[float, float, float], seed: int
) -> tuple[list[Interaction], list[Interaction], list[Interaction]]:
    by_user: dict[int, list[Interaction]] = {}
    for inter in sorted(interactions):
        by_user.setdefault(inter.user_id, []).append(inter)

    train, valid, test = [], [], []
    for user_id, rows in by_user.items():
        order = RngStream(seed, f"split:{user_id}").permutation(len(rows))
        shuffled = [rows[i] for i in order]
        n_train, n_valid, _ = split_counts(len(rows), ratios)
        train += shuffled[:n_train]
        valid += shuffled[n_train : n_train + n_valid]
        test += shuffled[n_train + n_valid :]
    return train, valid, test


def _split_global(
    interactions: list[Interaction], ratios: tuple[float, float, float], seed: int
) -> tuple[list[Interaction], list[Interaction], list[Interaction]]:
    rows = sorted(interactions)
    order = RngStream(seed, "split:global").permutation(len(rows))
    shuffled = [rows[i] for i in order]
    n_train, n_valid, _ = split_counts(len(rows), ratios)
    return shuffled[:n_train], shuffled[n_train : n_train + n_valid], shuffled[n_train + n_valid :]


def _remap(rows: list[Interaction], users: dict[int, int], items: dict[int, int]) -> tuple[Interaction, ...]:
    return tuple(
        sorted(
            Interaction(users[r.user_id], items[r.item_id], r.timestamp)
            for r in rows
            if r.user_id in users
        )
    )


def filter_and_split(
    raw: Iterable[Interaction],
    min_interactions: int,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    split_mode: str = "per_user",
) -> Dataset:
    """
    Filter to a k-core, remap ids densely and split.

    Args:
        raw: Interactions with original ids
        min_interactions: k-core threshold for users and items
        ratios: (train, valid, test), summing to 1
        seed: Master seed
        split_mode: "per_user" (each user's interactions cut separately)
            or "global" (one shuffle over all interactions)

    Returns:
        Dataset whose users all have at least one train interaction

    Raises:
        EmptyDatasetError: If filtering or splitting leaves nothing
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1: {ratios}")
    if split_mode not in ("per_user", "global"):
        raise ValueError(f"Unknown split_mode: {split_mode}")

    kept = kcore_filter(raw, min_interactions)
    if not kept:
        raise EmptyDatasetError(f"No interactions survive min_interactions={min_interactions}")

    item_ids = tuple(sorted({inter.item_id for inter in kept}))
    splitter = _split_per_user if split_mode == "per_user" else _split_global
    train, valid, test = splitter(kept, ratios, seed)

    trained_users = sorted({inter.user_id for inter in train})
    if not trained_users:
        raise EmptyDatasetError("No user has a train interaction")
    dropped = len({inter.user_id for inter in kept}) - len(trained_users)
    if dropped:
        logger.warning("Users without train interactions dropped", users=dropped)

    user_map = {raw_id: dense for dense, raw_id in enumerate(trained_users)}
    item_map = {raw_id: dense for dense, raw_id in enumerate(item_ids)}
    dataset = Dataset(
        num_users=len(trained_users),
        num_items=len(item_ids),
        train=_remap(train, user_map, item_map),
        valid=_remap(valid, user_map, item_map),
        test=_remap(test, user_map, item_map),
        user_ids=tuple(trained_users),
        item_ids=item_ids,
    )
    logger.info("Dataset split", split_mode=split_mode, **dataset.stats())
    return dataset


def build_ego_graphs(ds: Dataset) -> list[EgoGraph]:
    """One ego graph per user from its train items, ascending user id"""
    return [EgoGraph(user_id=u, items=tuple(items)) for u, items in ds.items_by_user("train").items()]


# =============================================================================
# Sidecar Files
# =============================================================================


def write_idmap(dataset: Dataset, path: Union[str, Path]) -> Path:
    """Write `orig<TAB>dense` lines, users then items after a #items marker"""
    path = Path(path)
    lines = [f"{raw}\t{dense}" for dense, raw in enumerate(dataset.user_ids)]
    lines.append(ITEMS_MARKER)
    lines += [f"{raw}\t{dense}" for dense, raw in enumerate(dataset.item_ids)]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_idmap(path: Union[str, Path]) -> tuple[dict[int, int], dict[int, int]]:
    """Read an idmap sidecar back into (user map, item map), original -> dense"""
    path = Path(path)
    users: dict[int, int] = {}
    items: dict[int, int] = {}
    target = users
    for line_number, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if line.strip() == ITEMS_MARKER:
            target = items
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise ParseError(str(path), line_number, line, "expected orig<TAB>dense")
        try:
            target[int(fields[0])] = int(fields[1])
        except ValueError:
            raise ParseError(str(path), line_number, line, "ids must be integers")
    return users, items


def write_interactions(dataset: Dataset, path: Union[str, Path]) -> Path:
    """
    Write every dense interaction in tsv format (`user<TAB>item[<TAB>timestamp]`).

    The output can be read back with ingest(path, "tsv").
    """
    path = Path(path)
    rows = sorted(dataset.train + dataset.valid + dataset.test)
    with open(path, "w") as f:
        for inter in rows:
            suffix = "" if inter.timestamp is None else f"\t{inter.timestamp}"
            f.write(f"{inter.user_id}\t{inter.item_id}{suffix}\n")
    return path
