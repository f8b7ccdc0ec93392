"""
Federated Recommendation Schema

Plain records shared by every actor of the simulator.

Data records:
    - Interaction: one (user, item) implicit-feedback event
    - Dataset: dense-indexed train/valid/test splits with id maps
    - EgoGraph: one user plus the items it interacted with in train

Protocol records:
    - MessageKind / RoundMessage: typed bus messages with parameter accounting
    - UploadBundle: privacy-protected embeddings a device sends to the server
    - LedgerRow: per-round uplink/downlink/device-to-device counters
    - MetricsReport: one evaluation row
"""

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Optional

import numpy as np

# =============================================================================
# Data Records
# =============================================================================


@dataclass(frozen=True, order=True)
class Interaction:
    """
    One positive implicit interaction.

    Attributes:
        user_id: User index (raw id before remapping, dense index after)
        item_id: Item index (raw id before remapping, dense index after)
        timestamp: Seconds since epoch, if the source has one
    """

    user_id: int
    item_id: int
    timestamp: Optional[int] = field(default=None, compare=False)

    def __post_init__(self):
        if self.user_id < 0 or self.item_id < 0:
            raise ValueError(f"Negative id in interaction: {self.user_id}, {self.item_id}")

    @property
    def pair(self) -> tuple[int, int]:
        return (self.user_id, self.item_id)


@dataclass(frozen=True)
class Dataset:
    """
    Filtered, remapped and split interaction data.

    Attributes:
        num_users: N, users are dense in [0, N)
        num_items: M, items are dense in [0, M)
        train: Training interactions sorted by (user, item)
        valid: Validation interactions sorted by (user, item)
        test: Test interactions sorted by (user, item)
        user_ids: Original user id of each dense user index
        item_ids: Original item id of each dense item index
    """

    num_users: int
    num_items: int
    train: tuple[Interaction, ...]
    valid: tuple[Interaction, ...]
    test: tuple[Interaction, ...]
    user_ids: tuple[int, ...]
    item_ids: tuple[int, ...]

    @property
    def user_map(self) -> dict[int, int]:
        """Original user id -> dense index"""
        return {raw: dense for dense, raw in enumerate(self.user_ids)}

    @property
    def item_map(self) -> dict[int, int]:
        """Original item id -> dense index"""
        return {raw: dense for dense, raw in enumerate(self.item_ids)}

    def items_by_user(self, split: str = "train") -> dict[int, list[int]]:
        """Group one split by user; item lists are ascending"""
        grouped: dict[int, list[int]] = defaultdict(list)
        for inter in getattr(self, split):
            grouped[inter.user_id].append(inter.item_id)
        return {user: sorted(items) for user, items in sorted(grouped.items())}

    def stats(self) -> dict[str, Any]:
        total = len(self.train) + len(self.valid) + len(self.test)
        return {
            "users": self.num_users,
            "items": self.num_items,
            "interactions": total,
            "train": len(self.train),
            "valid": len(self.valid),
            "test": len(self.test),
            "density": total / float(self.num_users * self.num_items),
        }


@dataclass(frozen=True)
class EgoGraph:
    """
    User-centered ego graph held privately by one device.

    Attributes:
        user_id: The center user
        items: Ascending, unique train items of the user
    """

    user_id: int
    items: tuple[int, ...]

    def __post_init__(self):
        if len(self.items) == 0:
            raise ValueError(f"Ego graph of user {self.user_id} has no items")
        if len(set(self.items)) != len(self.items):
            raise ValueError(f"Ego graph of user {self.user_id} has duplicate items")

    @property
    def n(self) -> int:
        return len(self.items)


# =============================================================================
# Protocol Records
# =============================================================================


class MessageKind(str, Enum):
    """Message types carried by the bus"""

    EGO_UPLOAD = "EgoUpload"
    GROUP_NOTIFY = "GroupNotify"
    NEIGHBOR_BROADCAST = "NeighborBroadcast"
    ITEM_UPLOAD = "ItemUpload"
    ITEM_FETCH = "ItemFetch"


class Direction(str, Enum):
    """Ledger column a message is charged to"""

    UPLINK = "uplink"
    DOWNLINK = "downlink"
    D2D = "d2d"


MESSAGE_DIRECTIONS = {
    MessageKind.EGO_UPLOAD: Direction.UPLINK,
    MessageKind.ITEM_UPLOAD: Direction.UPLINK,
    MessageKind.GROUP_NOTIFY: Direction.DOWNLINK,
    MessageKind.ITEM_FETCH: Direction.DOWNLINK,
    MessageKind.NEIGHBOR_BROADCAST: Direction.D2D,
}


@dataclass
class RoundMessage:
    """
    One bus message.

    Attributes:
        kind: Message type
        src: Sender actor id ("server" or "device:<u>")
        dst: Receiver actor id, or "group:<j>" for a multicast
        payload_params: Number of embedding scalars put on the wire
        round: Round the message belongs to
        layer: Propagation layer (broadcasts only)
        fanout: Number of receivers (1 except for multicasts)
        payload: Message body, never exported
    """

    kind: MessageKind
    src: str
    dst: str
    payload_params: int
    round: int
    layer: Optional[int] = None
    fanout: int = 1
    payload: Any = field(default=None, compare=False, repr=False)

    @property
    def direction(self) -> Direction:
        return MESSAGE_DIRECTIONS[self.kind]

    def to_record(self) -> dict[str, Any]:
        """Exported transcript fields (payload excluded)"""
        return {
            "round": self.round,
            "kind": self.kind.value,
            "src": self.src,
            "dst": self.dst,
            "layer": self.layer,
            "payload_params": self.payload_params,
        }


@dataclass
class UploadBundle:
    """
    Embeddings a sampled device uploads after local training, all post-LDP.

    Attributes:
        device_id: Uploading user
        ego_embedding: Combined user embedding after training
        positives: (item_id, embedding) for every private item
        fabricated: (item_id, embedding) for camouflage items
    """

    device_id: int
    ego_embedding: np.ndarray
    positives: list[tuple[int, np.ndarray]]
    fabricated: list[tuple[int, np.ndarray]]

    def item_embeddings(self) -> list[tuple[int, np.ndarray]]:
        """Positives and fabricated, in the order the server receives them"""
        return list(self.positives) + list(self.fabricated)

    @property
    def num_params(self) -> int:
        dim = int(self.ego_embedding.shape[0])
        return dim * (1 + len(self.positives) + len(self.fabricated))


@dataclass
class LedgerRow:
    """Communication counters of one round, in scalars"""

    round: int
    uplink: int = 0
    downlink: int = 0
    d2d: int = 0

    def charge(self, direction: Direction, params: int) -> None:
        setattr(self, direction.value, getattr(self, direction.value) + params)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class MetricsReport:
    """
    One evaluation row.

    Attributes:
        round: Round evaluated (0 = untrained)
        k: Cut-off of Recall@k / NDCG@k
        recall_at_k: Mean test recall over users with test items
        ndcg_at_k: Mean test NDCG over users with test items
        mean_loss: Mean BPR loss of the round's local training (None at round 0)
        comm: Ledger row of the round
        num_users: Users averaged over
        skipped_users: Users with test items missing from the registry
    """

    round: int
    k: int
    recall_at_k: float
    ndcg_at_k: float
    mean_loss: Optional[float]
    comm: LedgerRow
    num_users: int = 0
    skipped_users: int = 0

    def to_row(self) -> dict[str, Any]:
        """Flat row in report column order"""
        return {
            "round": self.round,
            "k": self.k,
            "recall": self.recall_at_k,
            "ndcg": self.ndcg_at_k,
            "mean_loss": self.mean_loss,
            "uplink": self.comm.uplink,
            "downlink": self.comm.downlink,
            "d2d": self.comm.d2d,
        }


REPORT_COLUMNS = ("round", "k", "recall", "ndcg", "mean_loss", "uplink", "downlink", "d2d")
LEDGER_COLUMNS = ("round", "uplink", "downlink", "d2d")
