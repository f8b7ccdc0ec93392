"""
Server Actor Module

The server houses the global item table and the ego-embedding registry.
Per round it:
    1. Serves item rows to devices (ItemFetch)
    2. Records uploaded ego-graph embeddings
    3. Co-clusters users and items and notifies groups
    4. Averages uploaded item embeddings (FedAvg)

It never sees ego graphs, interaction counts or raw gradients. Ranking for
evaluation is exposed through rank_topk().

Checkpoint layout (little-endian):
    b"SDFE1\\n"
    header line: JSON {"C", "M", "N", "d", "round"} + "\\n"
    item table:  M * d float32
    presence:    ceil(N / 8) bytes, bit u set when user u is registered
    registry:    N * d float32 (absent users stored as zeros)
"""

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import orjson
import structlog

from src.core.clustering import GroupAssignment, MembershipMatrix, assign_groups, fcm_fit
from src.core.embeddings import RngStream, check_finite, xavier_init
from src.errors import ProtocolError
from src.schema import UploadBundle

logger = structlog.get_logger(__name__)

CHECKPOINT_MAGIC = b"SDFE1\n"


# =============================================================================
# State
# =============================================================================


@dataclass
class ItemTable:
    """
    Global item embedding table.

    Attributes:
        embeddings: (M, d) float64
        version: Number of FedAvg rounds applied
    """

    embeddings: np.ndarray
    version: int = 0

    @property
    def num_items(self) -> int:
        return int(self.embeddings.shape[0])

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    def rows(self, item_ids: Iterable[int]) -> np.ndarray:
        return self.embeddings[list(item_ids)].copy()

    @classmethod
    def xavier(cls, num_items: int, dim: int, seed: int) -> "ItemTable":
        """One stream per item so the table does not depend on draw order"""
        rows = [
            xavier_init(RngStream(seed, f"item:{i}"), fan_in=dim, fan_out=num_items, d=dim)
            for i in range(num_items)
        ]
        return cls(embeddings=np.stack(rows))


@dataclass
class EgoRegistry:
    """
    Latest ego-graph embedding per user.

    Attributes:
        embeddings: (N, d); rows of absent users are zero
        present: (N,) bool
        rounds: (N,) round each row was received (-1 when absent)
    """

    embeddings: np.ndarray
    present: np.ndarray
    rounds: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.rounds is None:
            self.rounds = np.where(self.present, 0, -1).astype(np.int64)

    @classmethod
    def empty(cls, num_users: int, dim: int) -> "EgoRegistry":
        return cls(
            embeddings=np.zeros((num_users, dim)),
            present=np.zeros(num_users, dtype=bool),
        )

    @property
    def num_users(self) -> int:
        return int(self.embeddings.shape[0])

    def __contains__(self, user_id: int) -> bool:
        return 0 <= user_id < self.num_users and bool(self.present[user_id])

    def get(self, user_id: int) -> np.ndarray:
        if user_id not in self:
            raise KeyError(f"User {user_id} has no registered ego embedding")
        return self.embeddings[user_id]

    def update(self, user_id: int, embedding: np.ndarray, round_index: int) -> None:
        """Store an upload; older rounds never overwrite newer ones"""
        if embedding.shape != (self.embeddings.shape[1],):
            raise ProtocolError(
                f"Ego embedding of user {user_id} has shape {embedding.shape}, "
                f"expected {(self.embeddings.shape[1],)}"
            )
        if round_index < self.rounds[user_id]:
            logger.warning(
                "Stale ego upload ignored",
                user=user_id,
                round=round_index,
                latest=int(self.rounds[user_id]),
            )
            return
        self.embeddings[user_id] = check_finite("ego embedding", embedding)
        self.present[user_id] = True
        self.rounds[user_id] = round_index

    def covers(self, user_ids: Iterable[int]) -> bool:
        return all(u in self for u in user_ids)


# =============================================================================
# Aggregation and Clustering
# =============================================================================


def fedavg_items(table: ItemTable, uploads: list[UploadBundle]) -> ItemTable:
    """
    Average uploaded item embeddings into the table.

    Positives and fabricated negatives are treated identically. Uploads are
    grouped by item in device-id order, so the result does not depend on the
    order uploads arrived in.

    Args:
        table: Current item table
        uploads: This round's upload bundles

    Returns:
        New ItemTable with version + 1; items nobody uploaded keep their rows
    """
    collected: dict[int, list[np.ndarray]] = defaultdict(list)
    for bundle in sorted(uploads, key=lambda b: b.device_id):
        for item_id, embedding in bundle.item_embeddings():
            if embedding.shape != (table.dim,):
                raise ProtocolError(
                    f"Device {bundle.device_id} uploaded item {item_id} with shape "
                    f"{embedding.shape}, expected {(table.dim,)}"
                )
            if not 0 <= item_id < table.num_items:
                raise ProtocolError(f"Device {bundle.device_id} uploaded unknown item {item_id}")
            collected[item_id].append(embedding)

    embeddings = table.embeddings.copy()
    for item_id in sorted(collected):
        embeddings[item_id] = np.stack(collected[item_id]).mean(axis=0)

    logger.debug("FedAvg applied", bundles=len(uploads), items=len(collected))
    return ItemTable(embeddings=check_finite("item table", embeddings), version=table.version + 1)


def recluster(
    registry: EgoRegistry,
    table: ItemTable,
    C: int,
    F: int,
    l: float,
    rng: RngStream,
    max_iters: int = 100,
    tol: float = 1e-4,
    item_topk_mode: bool = False,
    users: Optional[Iterable[int]] = None,
) -> GroupAssignment:
    """
    Co-cluster ego embeddings and item embeddings, then form groups.

    Args:
        registry: Ego registry; must cover every scheduled user
        table: Item table
        C: Number of groups
        F: Fake items per group
        l: Fuzzy weighting exponent
        rng: Server stream
        max_iters: FCM iteration cap
        tol: FCM membership tolerance
        item_topk_mode: Per-item top-F group assignment
        users: Scheduled users (default: all)

    Returns:
        GroupAssignment with centroids and objective history attached
    """
    scheduled = list(range(registry.num_users)) if users is None else list(users)
    if not registry.covers(scheduled):
        missing = next(u for u in scheduled if u not in registry)
        raise ProtocolError(f"Ego registry has no embedding for scheduled user {missing}")

    X = np.concatenate([registry.embeddings, table.embeddings])
    fit = fcm_fit(X, C, l, max_iters, tol, rng)
    membership = MembershipMatrix(values=fit.membership, num_users=registry.num_users)
    assignment = assign_groups(membership, F, item_topk_mode=item_topk_mode)
    assignment.centroids = fit.centroids
    assignment.objective_history = fit.objective_history

    logger.info(
        "Reclustered",
        groups=C,
        active_groups=len(assignment.active_groups()),
        iterations=fit.iterations,
        converged=fit.converged,
    )
    return assignment


def rank_topk(
    registry: EgoRegistry,
    table: ItemTable,
    user_id: int,
    k: int,
    exclude: Optional[Iterable[int]] = None,
) -> list[int]:
    """
    Top-k items for a user by y_ui = <e_ego, e_i>.

    Args:
        registry: Ego registry (user must be present)
        table: Item table
        user_id: User to rank for
        k: Cut-off (>= 1)
        exclude: Item ids removed from the candidates

    Returns:
        Item ids, score descending, ties broken by lowest id
    """
    if k <= 0:
        raise ValueError(f"k must be positive: {k}")
    scores = table.embeddings @ registry.get(user_id)

    candidates = np.arange(table.num_items)
    if exclude:
        candidates = np.setdiff1d(candidates, np.fromiter(exclude, dtype=np.int64))
    order = np.lexsort((candidates, -scores[candidates]))
    return [int(i) for i in candidates[order[:k]]]


def full_table_uplink(num_items: int, dim: int) -> int:
    """Per-device uplink of a scheme that uploads the whole item table"""
    return num_items * dim


# =============================================================================
# Server Actor
# =============================================================================


class ServerActor:
    """Owns the item table and registry; all state changes go through here"""

    address = "server"

    def __init__(self, num_users: int, num_items: int, dim: int, seed: int):
        """
        Initialize the server with a Xavier item table.

        Args:
            num_users: N
            num_items: M
            dim: d
            seed: Master seed
        """
        self.table = ItemTable.xavier(num_items, dim, seed)
        self.registry = EgoRegistry.empty(num_users, dim)
        self.rng = RngStream(seed, "server")
        self.sampling_rng = RngStream(seed, "server:sampling")
        self.round = 0

    @property
    def dim(self) -> int:
        return self.table.dim

    def receive_ego(self, user_id: int, embedding: np.ndarray, round_index: int) -> None:
        self.registry.update(user_id, embedding, round_index)

    def aggregate(self, uploads: list[UploadBundle], round_index: int) -> None:
        """FedAvg the round's items and refresh the registry from bundle ego rows"""
        self.table = fedavg_items(self.table, uploads)
        for bundle in sorted(uploads, key=lambda b: b.device_id):
            self.registry.update(bundle.device_id, bundle.ego_embedding, round_index)
        self.round = round_index


# =============================================================================
# Checkpoint
# =============================================================================


def save_checkpoint(
    path: Union[str, Path],
    table: ItemTable,
    registry: EgoRegistry,
    round_index: int,
    num_groups: int,
) -> Path:
    """Write the server state (float32, little-endian)"""
    path = Path(path)
    header = orjson.dumps(
        {
            "C": num_groups,
            "M": table.num_items,
            "N": registry.num_users,
            "d": table.dim,
            "round": round_index,
        },
        option=orjson.OPT_SORT_KEYS,
    )
    registry_rows = np.where(registry.present[:, None], registry.embeddings, 0.0)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(header + b"\n")
        f.write(table.embeddings.astype("<f4").tobytes())
        f.write(np.packbits(registry.present, bitorder="little").tobytes())
        f.write(registry_rows.astype("<f4").tobytes())

    logger.info("Checkpoint written", path=str(path), round=round_index)
    return path


def load_checkpoint(path: Union[str, Path]) -> tuple[ItemTable, EgoRegistry, dict]:
    """
    Read a checkpoint written by save_checkpoint.

    Returns:
        (item table, registry, header); embeddings come back as float64
        holding the stored float32 values
    """
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"Not a checkpoint file: {path}")

    header_end = data.index(b"\n", len(CHECKPOINT_MAGIC))
    header = orjson.loads(data[len(CHECKPOINT_MAGIC) : header_end])
    N, M, d = header["N"], header["M"], header["d"]

    offset = header_end + 1
    table_bytes = M * d * 4
    bitmap_bytes = (N + 7) // 8
    registry_bytes = N * d * 4
    expected = offset + table_bytes + bitmap_bytes + registry_bytes
    if len(data) != expected:
        raise ValueError(f"Checkpoint {path} has {len(data)} bytes, expected {expected}")

    items = np.frombuffer(data, dtype="<f4", count=M * d, offset=offset).reshape(M, d)
    offset += table_bytes
    bits = np.frombuffer(data, dtype=np.uint8, count=bitmap_bytes, offset=offset)
    present = np.unpackbits(bits, count=N, bitorder="little").astype(bool)
    offset += bitmap_bytes
    users = np.frombuffer(data, dtype="<f4", count=N * d, offset=offset).reshape(N, d)

    table = ItemTable(embeddings=items.astype(np.float64), version=int(header["round"]))
    registry = EgoRegistry(embeddings=users.astype(np.float64), present=present.copy())
    return table, registry, header
