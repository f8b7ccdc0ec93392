"""
In-Process Message Bus

Synchronous bus between the server and device actors:
    - point-to-point mailboxes keyed by actor address
    - group multicast ("group:<j>") delivered to every member except the sender
    - a transcript of every message (payload excluded)
    - a communication ledger charged from the same messages

Messages are sent from the scheduler thread only, so delivery order is the
send order and the transcript is reproducible.
"""

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Iterable

import structlog

from src.errors import ProtocolError
from src.schema import MESSAGE_DIRECTIONS, LedgerRow, MessageKind, RoundMessage

logger = structlog.get_logger(__name__)

GROUP_PREFIX = "group:"


def group_address(group_id: int) -> str:
    return f"{GROUP_PREFIX}{group_id}"


# =============================================================================
# Ledger
# =============================================================================


class CommLedger:
    """Per-round scalar counters split by direction"""

    def __init__(self):
        self._rows: dict[int, LedgerRow] = {}

    def charge(self, round_index: int, kind: MessageKind, params: int) -> None:
        row = self._rows.setdefault(round_index, LedgerRow(round=round_index))
        row.charge(MESSAGE_DIRECTIONS[kind], params)

    def row(self, round_index: int) -> LedgerRow:
        """Counters of one round (zeros when nothing was sent)"""
        current = self._rows.get(round_index)
        return replace(current) if current else LedgerRow(round=round_index)

    def rows(self) -> list[LedgerRow]:
        return [replace(self._rows[r]) for r in sorted(self._rows)]

    def totals(self) -> dict[str, int]:
        rows = self.rows()
        return {
            "uplink": sum(r.uplink for r in rows),
            "downlink": sum(r.downlink for r in rows),
            "d2d": sum(r.d2d for r in rows),
        }

    def copy(self) -> "CommLedger":
        clone = CommLedger()
        clone._rows = {r: replace(row) for r, row in self._rows.items()}
        return clone

    def __eq__(self, other: object) -> bool:
        return isinstance(other, CommLedger) and self.rows() == other.rows()


# =============================================================================
# Transcript
# =============================================================================


@dataclass
class Transcript:
    """Ordered record of every message, payloads excluded"""

    records: list[dict[str, Any]] = field(default_factory=list)

    def append(self, message: RoundMessage) -> None:
        self.records.append(message.to_record())

    def __len__(self) -> int:
        return len(self.records)

    def replay_ledger(self) -> CommLedger:
        """Rebuild the ledger from the transcript alone"""
        ledger = CommLedger()
        for record in self.records:
            ledger.charge(record["round"], MessageKind(record["kind"]), record["payload_params"])
        return ledger

    def for_round(self, round_index: int) -> list[dict[str, Any]]:
        return [r for r in self.records if r["round"] == round_index]


# =============================================================================
# Bus
# =============================================================================


@dataclass
class BusSnapshot:
    transcript_length: int
    ledger: CommLedger
    mailboxes: dict[str, list[RoundMessage]]
    last_round: int
    sent: int
    delivered: int
    groups: dict[str, tuple[str, ...]]


class MessageBus:
    """Mailboxes, group rosters, transcript and ledger"""

    def __init__(self):
        self.transcript = Transcript()
        self.ledger = CommLedger()
        self._mailboxes: dict[str, deque[RoundMessage]] = {}
        self._groups: dict[str, tuple[str, ...]] = {}
        self._last_round = 0
        self._sent = 0
        self._delivered = 0

    # -- topology ------------------------------------------------------------

    def register(self, address: str) -> None:
        if address.startswith(GROUP_PREFIX):
            raise ValueError(f"Actor address may not start with {GROUP_PREFIX!r}: {address}")
        self._mailboxes.setdefault(address, deque())

    def set_groups(self, rosters: dict[int, Iterable[str]]) -> None:
        """Replace every group roster (called after reclustering)"""
        self._groups = {group_address(g): tuple(members) for g, members in rosters.items()}
        for members in self._groups.values():
            for member in members:
                if member not in self._mailboxes:
                    raise ProtocolError(f"Group member {member} is not registered")

    def members(self, address: str) -> tuple[str, ...]:
        return self._groups.get(address, ())

    # -- delivery ------------------------------------------------------------

    def _receivers(self, message: RoundMessage) -> list[str]:
        if message.dst.startswith(GROUP_PREFIX):
            if message.dst not in self._groups:
                raise ProtocolError(f"Unknown group {message.dst}")
            members = self._groups[message.dst]
            if message.src not in members:
                raise ProtocolError(f"{message.src} is not a member of {message.dst}")
            receivers = [m for m in members if m != message.src]
            if len(receivers) != message.fanout:
                raise ProtocolError(
                    f"Multicast to {message.dst} declares fanout {message.fanout}, "
                    f"group has {len(receivers)} receivers"
                )
            return receivers
        if message.dst not in self._mailboxes:
            raise ProtocolError(f"Unknown destination {message.dst}")
        if message.fanout != 1:
            raise ProtocolError(f"Point-to-point message with fanout {message.fanout}")
        return [message.dst]

    def send(self, message: RoundMessage) -> None:
        """Record, charge and enqueue a message"""
        if message.round < self._last_round:
            raise ProtocolError(
                f"Message for round {message.round} after round {self._last_round}"
            )
        if message.payload_params < 0:
            raise ProtocolError(f"Negative payload size: {message.payload_params}")

        receivers = self._receivers(message)
        for receiver in receivers:
            self._mailboxes[receiver].append(message)
        self._last_round = message.round
        self._sent += len(receivers)
        self.transcript.append(message)
        self.ledger.charge(message.round, message.kind, message.payload_params)

    def drain(self, address: str) -> list[RoundMessage]:
        """Remove and return everything queued for an actor, in send order"""
        box = self._mailboxes.get(address)
        if box is None:
            raise ProtocolError(f"Unknown actor {address}")
        messages = list(box)
        box.clear()
        self._delivered += len(messages)
        return messages

    def pending(self) -> int:
        """Messages sent but not yet drained"""
        return self._sent - self._delivered

    def assert_quiescent(self, where: str) -> None:
        if self.pending():
            raise ProtocolError(f"{self.pending()} undelivered messages at {where}")

    # -- rollback ------------------------------------------------------------

    def snapshot(self) -> BusSnapshot:
        return BusSnapshot(
            transcript_length=len(self.transcript),
            ledger=self.ledger.copy(),
            mailboxes={a: list(box) for a, box in self._mailboxes.items()},
            last_round=self._last_round,
            sent=self._sent,
            delivered=self._delivered,
            groups=dict(self._groups),
        )

    def rollback(self, snap: BusSnapshot) -> None:
        """Restore the state captured by snapshot()"""
        del self.transcript.records[snap.transcript_length :]
        self.ledger = snap.ledger.copy()
        self._mailboxes = {a: deque(box) for a, box in snap.mailboxes.items()}
        self._last_round = snap.last_round
        self._sent = snap.sent
        self._delivered = snap.delivered
        self._groups = dict(snap.groups)

    @property
    def groups(self) -> dict[str, tuple[str, ...]]:
        return dict(self._groups)
