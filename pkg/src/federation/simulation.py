"""
Round Scheduler

Drives the protocol over the in-process bus:

    round 0 (initialization): ItemFetch of private rows, EgoUpload
    round r >= 1:
        1. ItemFetch         server -> device   private item rows
        2. EgoUpload         device -> server   (every ego_upload_every rounds)
        3. recluster         (every recluster_every rounds)
           GroupNotify       server -> device   roster + fake item rows
           ItemFetch         server -> device   uniform negatives for sampled devices
        4. NeighborBroadcast device -> group    K layers with barriers
           local training on the sampled devices
        5. ItemUpload        device -> server
        6. FedAvg + registry refresh

Device work inside a step runs on a thread pool; messages are sent by the
scheduler in ascending device order after each barrier, so results do not
depend on the number of threads.
"""

import copy
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, TypeVar

import numpy as np
import structlog

from src.core.clustering import GroupAssignment
from src.core.device import DeviceActor, DeviceSettings, DeviceState, GroupNotice, ItemRows
from src.core.embeddings import RngStream, xavier_init
from src.core.metrics import evaluate
from src.core.server import EgoRegistry, ItemTable, ServerActor, recluster
from src.errors import RoundAbortedError
from src.federation.bus import MessageBus, group_address
from src.ingestion import build_ego_graphs, filter_and_split, ingest, make_block_dataset
from src.schema import Dataset, ExperimentConfig, MessageKind, MetricsReport, RoundMessage, RuntimeSettings

logger = structlog.get_logger(__name__)

T = TypeVar("T")


# =============================================================================
# World
# =============================================================================


@dataclass
class World:
    """
    Complete simulation state.

    Attributes:
        config: Experiment configuration
        dataset: Dataset the devices were built from (the evaluator's view)
        server: Server actor
        devices: user_id -> device actor
        bus: Message bus with transcript and ledger
        round: Last completed round (0 after initialization)
        assignment: Current grouping, None before the first clustering
        last_mean_loss: Mean local BPR loss of the last round
        threads: Worker threads for device steps
    """

    config: ExperimentConfig
    dataset: Dataset
    server: ServerActor
    devices: dict[int, DeviceActor]
    bus: MessageBus
    round: int = 0
    assignment: Optional[GroupAssignment] = None
    last_mean_loss: Optional[float] = None
    threads: int = 1
    _executor: Optional[ThreadPoolExecutor] = field(default=None, repr=False)

    @property
    def device_order(self) -> list[int]:
        return sorted(self.devices)

    def map_devices(self, fn: Callable[[DeviceActor], T], user_ids: list[int]) -> list[T]:
        """Apply fn to devices (possibly concurrently); results follow user_ids"""
        actors = [self.devices[u] for u in user_ids]
        if self.threads <= 1 or len(actors) <= 1:
            return [fn(actor) for actor in actors]
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=self.threads)
        return list(self._executor.map(fn, actors))

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None


def load_dataset(config: ExperimentConfig) -> Dataset:
    """Dataset named by the configuration (file or synthetic corpus)"""
    if config.dataset_format == "synthetic":
        return make_block_dataset(
            num_users=config.synthetic_users,
            num_items=config.synthetic_items,
            communities=config.synthetic_communities,
            train_per_user=config.synthetic_train_per_user,
            seed=config.seed,
            ratios=config.ratios,
        )
    raw = ingest(config.dataset_path, config.dataset_format)
    return filter_and_split(
        raw,
        config.resolved_min_interactions,
        ratios=config.ratios,
        seed=config.seed,
        split_mode=config.split_mode,
    )


def device_settings(config: ExperimentConfig, num_items: int) -> DeviceSettings:
    return DeviceSettings(
        num_items=num_items,
        embedding_dim=config.embedding_dim,
        layers=config.layers,
        alphas=config.alphas,
        lr=config.lr,
        weight_decay=config.weight_decay,
        local_epochs=config.local_epochs,
        neg_count=config.neg_count,
        fallback_negatives=config.fallback_negatives,
        delta=config.delta,
        ldp_lambda=config.ldp_lambda,
    )


def build_world(
    config: ExperimentConfig, dataset: Dataset, threads: Optional[int] = None
) -> World:
    """
    Create the server, one device per user and the bus; nothing is sent yet.

    Args:
        config: Experiment configuration
        dataset: Split dataset
        threads: Worker threads (default: SDFE_THREADS)

    Returns:
        World at round 0 before initialization
    """
    d = config.embedding_dim
    N, M = dataset.num_users, dataset.num_items
    settings = device_settings(config, M)
    server = ServerActor(N, M, d, config.seed)
    bus = MessageBus()
    bus.register(server.address)

    devices: dict[int, DeviceActor] = {}
    for ego in build_ego_graphs(dataset):
        rng = RngStream(config.seed, f"device:{ego.user_id}")
        state = DeviceState(
            ego=ego,
            user_param=xavier_init(rng.child("init"), fan_in=d, fan_out=N, d=d),
            item_params=np.zeros((ego.n, d)),
            rng=rng,
            num_items=M,
        )
        actor = DeviceActor(state, settings)
        bus.register(actor.address)
        devices[ego.user_id] = actor

    if threads is None:
        threads = RuntimeSettings().threads
    logger.info("World built", users=N, items=M, dim=d, threads=threads)
    return World(config=config, dataset=dataset, server=server, devices=devices, bus=bus, threads=threads)


# =============================================================================
# Protocol Steps
# =============================================================================


def _deliver(world: World, user_ids: list[int]) -> None:
    for u in user_ids:
        actor = world.devices[u]
        for message in world.bus.drain(actor.address):
            actor.handle(message)


def _fetch_private_rows(world: World, round_index: int) -> None:
    d = world.server.dim
    order = world.device_order
    for u in order:
        items = world.devices[u].state.ego.items
        world.bus.send(
            RoundMessage(
                kind=MessageKind.ITEM_FETCH,
                src=world.server.address,
                dst=world.devices[u].address,
                payload_params=len(items) * d,
                round=round_index,
                payload=ItemRows(item_ids=items, embeddings=world.server.table.rows(items)),
            )
        )
    _deliver(world, order)


def _collect_ego_uploads(world: World, round_index: int) -> None:
    order = world.device_order
    for message in world.map_devices(lambda actor: actor.ego_upload(round_index), order):
        world.bus.send(message)
    for message in world.bus.drain(world.server.address):
        user_id, embedding = message.payload
        world.server.receive_ego(user_id, embedding, round_index)


def _cluster(world: World, round_index: int) -> GroupAssignment:
    config = world.config
    num_points = world.dataset.num_users + world.dataset.num_items
    groups = config.resolved_groups
    if groups > num_points:
        logger.warning("Group count exceeds clustered points, clamping", requested=groups, points=num_points)
        groups = num_points
    return recluster(
        world.server.registry,
        world.server.table,
        C=groups,
        F=config.fake_items,
        l=config.fuzziness,
        rng=RngStream(config.seed, f"server:cluster:{round_index}"),
        max_iters=config.fcm_max_iters,
        tol=config.fcm_tol,
        item_topk_mode=config.item_topk_mode,
        users=world.device_order,
    )


def _notify_groups(world: World, round_index: int) -> None:
    assignment = world.assignment
    d = world.server.dim
    world.bus.set_groups(
        {
            g.group_id: [world.devices[u].address for u in g.users]
            for g in assignment.active_groups()
        }
    )
    for group in assignment.active_groups():
        fake_rows = world.server.table.rows(group.fake_items) if group.fake_items else np.zeros((0, d))
        for u in group.users:
            world.bus.send(
                RoundMessage(
                    kind=MessageKind.GROUP_NOTIFY,
                    src=world.server.address,
                    dst=world.devices[u].address,
                    payload_params=len(group.fake_items) * d,
                    round=round_index,
                    payload=GroupNotice(
                        group_id=group.group_id,
                        roster=group.users,
                        fake_items=group.fake_items,
                        fake_embeddings=fake_rows,
                    ),
                )
            )
    _deliver(world, world.device_order)


def _sample_devices(world: World, round_index: int) -> list[int]:
    frac = world.config.sample_frac
    sampled: list[int] = []
    for group in world.assignment.active_groups():
        count = math.ceil(frac * len(group.users))
        if count >= len(group.users):
            sampled += list(group.users)
            continue
        rng = RngStream(world.config.seed, f"server:sampling:{round_index}:{group.group_id}")
        sampled += [int(u) for u in rng.choice(np.asarray(group.users), count)]
    return sorted(sampled)


def _fetch_fallbacks(world: World, round_index: int, sampled: list[int]) -> None:
    d = world.server.dim
    needing = [u for u in sampled if world.devices[u].needs_fallback()]
    for u, ids in zip(needing, world.map_devices(lambda actor: actor.choose_fallback(), needing)):
        world.bus.send(
            RoundMessage(
                kind=MessageKind.ITEM_FETCH,
                src=world.server.address,
                dst=world.devices[u].address,
                payload_params=len(ids) * d,
                round=round_index,
                payload=ItemRows(
                    item_ids=tuple(ids),
                    embeddings=world.server.table.rows(ids) if ids else np.zeros((0, d)),
                    purpose="fallback",
                ),
            )
        )
    _deliver(world, needing)


def _propagate(world: World, round_index: int) -> None:
    """K layers of group multicast with a barrier after every layer"""
    senders: list[tuple[int, str]] = []
    for group in world.assignment.active_groups():
        if len(group.users) > 1 and group.fake_items:
            address = group_address(group.group_id)
            senders += [(u, address) for u in group.users]
    if not senders:
        return

    users = sorted(u for u, _ in senders)
    address_of = dict(senders)
    for layer in range(world.config.layers):
        messages = world.map_devices(
            lambda actor: actor.broadcast(round_index, layer, address_of[actor.user_id]), users
        )
        for message in messages:
            world.bus.send(message)
        _deliver(world, users)


def _train(world: World, sampled: list[int]) -> Optional[float]:
    losses = [loss for loss in world.map_devices(lambda actor: actor.train(), sampled) if loss is not None]
    if not losses:
        return None
    return float(np.add.reduce(np.asarray(losses, dtype=np.float64)) / len(losses))


def _collect_uploads(world: World, round_index: int, sampled: list[int]) -> None:
    for message in world.map_devices(lambda actor: actor.upload(round_index), sampled):
        world.bus.send(message)
    bundles = [message.payload for message in world.bus.drain(world.server.address)]
    world.server.aggregate(bundles, round_index)


# =============================================================================
# Rounds
# =============================================================================


def initialize(world: World) -> World:
    """Round 0: devices fetch their rows and register ego embeddings"""
    _fetch_private_rows(world, 0)
    _collect_ego_uploads(world, 0)
    world.bus.assert_quiescent("initialization")
    world.round = 0
    logger.info("World initialized", registered=int(world.server.registry.present.sum()))
    return world


def _snapshot(world: World) -> dict:
    return {
        "server": copy.deepcopy(world.server),
        "devices": copy.deepcopy(world.devices),
        "assignment": copy.deepcopy(world.assignment),
        "last_mean_loss": world.last_mean_loss,
        "bus": world.bus.snapshot(),
    }


def _restore(world: World, snap: dict) -> None:
    world.server = snap["server"]
    world.devices = snap["devices"]
    world.assignment = snap["assignment"]
    world.last_mean_loss = snap["last_mean_loss"]
    world.bus.rollback(snap["bus"])


def run_round(world: World) -> World:
    """
    Execute one protocol round.

    On any actor error the world is restored to its pre-round state and
    RoundAbortedError is raised.
    """
    config = world.config
    r = world.round + 1
    snap = _snapshot(world)
    try:
        _fetch_private_rows(world, r)

        if (r - 1) % config.ego_upload_every == 0:
            _collect_ego_uploads(world, r)

        if world.assignment is None or (r - 1) % config.recluster_every == 0:
            world.assignment = _cluster(world, r)
        _notify_groups(world, r)

        sampled = _sample_devices(world, r)
        _fetch_fallbacks(world, r, sampled)

        _propagate(world, r)
        mean_loss = _train(world, sampled)

        _collect_uploads(world, r, sampled)

        for u in world.device_order:
            world.devices[u].end_round()
        world.bus.assert_quiescent(f"end of round {r}")
    except Exception as e:
        _restore(world, snap)
        logger.error("Round aborted", round=r, error=str(e), error_type=type(e).__name__)
        raise RoundAbortedError(r, e) from e

    world.round = r
    world.last_mean_loss = mean_loss
    row = world.bus.ledger.row(r)
    logger.info(
        "Round complete",
        round=r,
        sampled=len(sampled),
        mean_loss=mean_loss,
        uplink=row.uplink,
        downlink=row.downlink,
        d2d=row.d2d,
    )
    return world


# =============================================================================
# Experiment
# =============================================================================


@dataclass
class ServerSnapshot:
    round: int
    table: ItemTable
    registry: EgoRegistry
    valid_recall: float


class Experiment:
    """
    One run: build, initialize, iterate rounds, evaluate.

    When select_on_valid is set, `best` holds the server state of the
    evaluated round with the highest validation recall.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        dataset: Optional[Dataset] = None,
        threads: Optional[int] = None,
    ):
        """
        Initialize an experiment.

        Args:
            config: Validated configuration
            dataset: Pre-loaded dataset (default: load from config)
            threads: Worker threads (default: SDFE_THREADS)
        """
        self.config = config
        self.dataset = dataset if dataset is not None else load_dataset(config)
        self.world = build_world(config, self.dataset, threads=threads)
        self.reports: list[MetricsReport] = []
        self.best: Optional[ServerSnapshot] = None
        self.stopped_early = False
        self._stale = 0

    def _select(self) -> bool:
        """Track the best validation round; True when patience is exhausted"""
        valid = evaluate(self.world, self.config.k, split="valid")
        if self.best is None or valid.recall_at_k > self.best.valid_recall:
            self.best = ServerSnapshot(
                round=self.world.round,
                table=copy.deepcopy(self.world.server.table),
                registry=copy.deepcopy(self.world.server.registry),
                valid_recall=valid.recall_at_k,
            )
            self._stale = 0
            return False
        self._stale += 1
        patience = self.config.early_stop_patience
        return patience > 0 and self._stale >= patience

    def _report(self) -> tuple[MetricsReport, bool]:
        report = evaluate(self.world, self.config.k, split="test")
        self.reports.append(report)
        stop = self._select() if self.config.select_on_valid else False
        return report, stop

    def run(self) -> Iterator[MetricsReport]:
        """Yield the round-0 report and one report per evaluated round"""
        try:
            initialize(self.world)
            report, stop = self._report()
            yield report
            for r in range(1, self.config.rounds + 1):
                if stop:
                    break
                run_round(self.world)
                if r % self.config.eval_every == 0:
                    report, stop = self._report()
                    yield report
            if stop:
                self.stopped_early = True
                logger.info("Early stop", round=self.world.round, best_round=self.best.round)
        finally:
            self.world.close()

    def final_state(self) -> tuple[ItemTable, EgoRegistry, int]:
        """Server state to checkpoint: best validation round or the last round"""
        if self.config.select_on_valid and self.best is not None:
            return self.best.table, self.best.registry, self.best.round
        return self.world.server.table, self.world.server.registry, self.world.round


def run_experiment(
    config: ExperimentConfig,
    dataset: Optional[Dataset] = None,
    threads: Optional[int] = None,
) -> Iterator[MetricsReport]:
    """Stream MetricsReports of a full run (round 0 first)"""
    return Experiment(config, dataset=dataset, threads=threads).run()
