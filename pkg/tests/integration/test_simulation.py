"""End-to-end protocol runs: accounting, determinism, rollback, selection"""

import numpy as np
import pytest

from src.core.device import DeviceActor
from src.core.metrics import evaluate
from src.core.server import ItemTable, load_checkpoint, save_checkpoint
from src.errors import RoundAbortedError
from src.federation.simulation import Experiment, build_world, initialize, run_experiment, run_round
from src.schema import ExperimentConfig, MessageKind

pytestmark = pytest.mark.integration


def _world(config: ExperimentConfig, dataset, threads: int = 1):
    return initialize(build_world(config, dataset, threads=threads))


def _expected_row(world, sampled: list[int]) -> tuple[int, int, int]:
    """(uplink, downlink, d2d) of the last round from the grouping that ran"""
    config = world.config
    d, K = config.embedding_dim, config.layers
    train = world.dataset.items_by_user("train")

    uplink = len(train) * d
    uplink += sum(d * (1 + len(train[u]) + config.neg_count) for u in sampled)

    downlink = sum(len(items) * d for items in train.values())
    d2d = 0
    for group in world.assignment.active_groups():
        downlink += len(group.users) * len(group.fake_items) * d
        for u in group.users:
            if u in sampled and config.local_epochs > 0:
                linked = set(group.fake_items) - set(train[u])
                available = world.dataset.num_items - len(train[u]) - len(linked)
                downlink += min(config.fallback_negatives, available) * d
        if len(group.users) > 1 and group.fake_items:
            d2d += len(group.users) * (len(group.users) - 1) * K * d
    return uplink, downlink, d2d


class TestAccounting:
    def test_initialization_round(self, tiny_config, tiny_dataset):
        world = _world(tiny_config, tiny_dataset)
        row = world.bus.ledger.row(0)
        d = tiny_config.embedding_dim
        assert row.uplink == tiny_dataset.num_users * d
        assert row.downlink == len(tiny_dataset.train) * d
        assert row.d2d == 0
        assert world.server.registry.covers(range(tiny_dataset.num_users))

    def test_round_matches_protocol_costs(self, tiny_config, tiny_dataset):
        world = _world(tiny_config, tiny_dataset)
        for r in (1, 2):
            run_round(world)
            row = world.bus.ledger.row(r)
            expected = _expected_row(world, world.device_order)
            assert (row.uplink, row.downlink, row.d2d) == expected
            assert world.bus.pending() == 0

    def test_broadcasts_per_group_layer(self, tiny_config, tiny_dataset):
        world = _world(tiny_config, tiny_dataset)
        run_round(world)
        broadcasts = [r for r in world.bus.transcript.for_round(1) if r["kind"] == "NeighborBroadcast"]
        expected = sum(
            len(g.users) * tiny_config.layers
            for g in world.assignment.active_groups()
            if len(g.users) > 1 and g.fake_items
        )
        assert len(broadcasts) == expected
        assert sorted({r["layer"] for r in broadcasts}) == (list(range(tiny_config.layers)) if expected else [])

    def test_upload_size_per_device(self, tiny_config, tiny_dataset):
        world = _world(tiny_config, tiny_dataset)
        run_round(world)
        uploads = [r for r in world.bus.transcript.for_round(1) if r["kind"] == MessageKind.ITEM_UPLOAD.value]
        d = tiny_config.embedding_dim
        assert len(uploads) == tiny_dataset.num_users
        assert {r["payload_params"] for r in uploads} == {d * (1 + 16 + 1)}

    def test_uniform_negatives_fetched_with_fakes(self, tiny_config, tiny_dataset):
        world = _world(tiny_config, tiny_dataset)
        run_round(world)
        fallback_fetches = [
            m
            for m in world.bus.transcript.for_round(1)
            if m["kind"] == "ItemFetch" and m["payload_params"] == tiny_config.embedding_dim
        ]
        assert any(g.fake_items for g in world.assignment.active_groups())
        assert len(fallback_fetches) == tiny_dataset.num_users

    def test_no_training_no_uniform_negatives(self, tiny_config, tiny_dataset):
        config = tiny_config.model_copy(update={"local_epochs": 0, "fake_items": 0})
        world = _world(config, tiny_dataset)
        run_round(world)
        assert world.bus.ledger.row(1).downlink == len(tiny_dataset.train) * config.embedding_dim

    def test_no_fake_items_means_no_d2d(self, tiny_config, tiny_dataset):
        config = tiny_config.model_copy(update={"fake_items": 0})
        world = _world(config, tiny_dataset)
        run_round(world)
        row = world.bus.ledger.row(1)
        d = config.embedding_dim
        assert row.d2d == 0
        assert row.downlink == len(tiny_dataset.train) * d + tiny_dataset.num_users * d

    def test_ego_upload_schedule(self, tiny_config, tiny_dataset):
        config = tiny_config.model_copy(update={"ego_upload_every": 2})
        world = _world(config, tiny_dataset)
        run_round(world)
        run_round(world)
        d = config.embedding_dim
        def ego_uploads(r: int) -> int:
            return sum(1 for m in world.bus.transcript.for_round(r) if m["kind"] == "EgoUpload")

        assert ego_uploads(1) == tiny_dataset.num_users
        assert ego_uploads(2) == 0
        assert world.bus.ledger.row(2).uplink == tiny_dataset.num_users * d * 18

    def test_partial_sampling(self, tiny_config, tiny_dataset):
        config = tiny_config.model_copy(update={"sample_frac": 0.5})
        world = _world(config, tiny_dataset)
        run_round(world)
        uploads = [m for m in world.bus.transcript.for_round(1) if m["kind"] == "ItemUpload"]
        expected = sum(-(-len(g.users) // 2) for g in world.assignment.active_groups())
        assert len(uploads) == expected

    def test_transcript_replays_ledger(self, tiny_config, tiny_dataset):
        world = _world(tiny_config, tiny_dataset)
        run_round(world)
        run_round(world)
        assert world.bus.transcript.replay_ledger() == world.bus.ledger

    def test_server_never_receives_raw_interactions(self, tiny_config, tiny_dataset):
        world = _world(tiny_config, tiny_dataset)
        run_round(world)
        kinds_to_server = {r["kind"] for r in world.bus.transcript.records if r["dst"] == "server"}
        assert kinds_to_server == {"EgoUpload", "ItemUpload"}


class TestDeterminism:
    def test_same_seed_same_run(self, tiny_config, tiny_dataset):
        a = list(run_experiment(tiny_config, dataset=tiny_dataset, threads=1))
        b = list(run_experiment(tiny_config, dataset=tiny_dataset, threads=1))
        assert [r.to_row() for r in a] == [r.to_row() for r in b]

    def test_thread_count_irrelevant(self, tiny_config, tiny_dataset):
        worlds = []
        for threads in (1, 4):
            world = _world(tiny_config, tiny_dataset, threads=threads)
            run_round(world)
            run_round(world)
            world.close()
            worlds.append(world)
        one, four = worlds
        assert one.bus.transcript.records == four.bus.transcript.records
        assert np.array_equal(one.server.table.embeddings, four.server.table.embeddings)
        assert np.array_equal(one.server.registry.embeddings, four.server.registry.embeddings)

    def test_seed_changes_run(self, tiny_config, tiny_dataset):
        other = tiny_config.model_copy(update={"seed": 4})
        a = _world(tiny_config, tiny_dataset)
        b = _world(other, tiny_dataset)
        assert not np.array_equal(a.server.table.embeddings, b.server.table.embeddings)


class TestRollback:
    def test_failed_round_leaves_world_unchanged(self, tiny_config, tiny_dataset, mocker):
        world = _world(tiny_config, tiny_dataset)
        run_round(world)
        table = world.server.table.embeddings.copy()
        registry = world.server.registry.embeddings.copy()
        params = {u: a.state.user_param.copy() for u, a in world.devices.items()}
        ledger = world.bus.ledger.copy()
        records = len(world.bus.transcript)

        mocker.patch.object(DeviceActor, "train", side_effect=RuntimeError("device crashed"))
        with pytest.raises(RoundAbortedError) as info:
            run_round(world)

        assert info.value.round_index == 2
        assert world.round == 1
        assert np.array_equal(world.server.table.embeddings, table)
        assert np.array_equal(world.server.registry.embeddings, registry)
        assert all(np.array_equal(world.devices[u].state.user_param, p) for u, p in params.items())
        assert world.bus.ledger == ledger
        assert len(world.bus.transcript) == records
        assert world.bus.pending() == 0

    def test_world_usable_after_abort(self, tiny_config, tiny_dataset, mocker):
        world = _world(tiny_config, tiny_dataset)
        mocker.patch.object(DeviceActor, "train", side_effect=RuntimeError("transient"))
        with pytest.raises(RoundAbortedError):
            run_round(world)
        mocker.stopall()
        run_round(world)
        assert world.round == 1


class TestEvaluate:
    def test_world_round_and_ledger(self, tiny_config, tiny_dataset):
        world = _world(tiny_config, tiny_dataset)
        run_round(world)
        report = evaluate(world, tiny_config.k)
        assert report.round == 1
        assert report.comm == world.bus.ledger.row(1)
        assert report.mean_loss == world.last_mean_loss
        assert report.skipped_users == 0
        assert 0.0 <= report.recall_at_k <= 1.0

    def test_valid_split(self, tiny_config, tiny_dataset):
        world = _world(tiny_config, tiny_dataset)
        report = evaluate(world, tiny_config.k, split="valid")
        assert report.round == 0
        assert report.num_users == len(tiny_dataset.items_by_user("valid"))


class TestExperiment:
    def test_zero_rounds(self, tiny_config, tiny_dataset):
        config = tiny_config.model_copy(update={"rounds": 0})
        reports = list(run_experiment(config, dataset=tiny_dataset))
        assert [r.round for r in reports] == [0]
        assert reports[0].mean_loss is None

    def test_eval_schedule(self, tiny_config, tiny_dataset):
        config = tiny_config.model_copy(update={"rounds": 4, "eval_every": 2})
        reports = list(run_experiment(config, dataset=tiny_dataset))
        assert [r.round for r in reports] == [0, 2, 4]
        assert all(r.mean_loss is not None for r in reports[1:])
        assert all(0.0 <= r.recall_at_k <= 1.0 for r in reports)

    def test_select_on_valid(self, tiny_config, tiny_dataset):
        config = tiny_config.model_copy(update={"rounds": 3, "select_on_valid": True})
        experiment = Experiment(config, dataset=tiny_dataset)
        list(experiment.run())
        assert experiment.best is not None
        table, registry, round_index = experiment.final_state()
        assert round_index == experiment.best.round
        assert table is experiment.best.table

    def test_early_stop(self, tiny_config, tiny_dataset, tmp_path):
        # k covers every candidate item, so valid recall is pinned at 1.0
        config = tiny_config.model_copy(
            update={"rounds": 6, "k": 40, "select_on_valid": True, "early_stop_patience": 2}
        )
        initial = ItemTable.xavier(tiny_dataset.num_items, config.embedding_dim, config.seed)
        experiment = Experiment(config, dataset=tiny_dataset)
        reports = list(experiment.run())

        assert experiment.stopped_early
        assert [r.round for r in reports] == [0, 1, 2]
        assert experiment.world.round == 2
        assert experiment.best.round == 0
        assert experiment.best.valid_recall == 1.0

        table, registry, round_index = experiment.final_state()
        assert round_index == 0
        assert np.array_equal(table.embeddings, initial.embeddings)

        path = save_checkpoint(tmp_path / "best.sdfe", table, registry, round_index, config.resolved_groups)
        loaded, _, header = load_checkpoint(path)
        assert header["round"] == 0
        assert np.array_equal(loaded.embeddings, initial.embeddings.astype(np.float32))

    def test_last_state_without_selection(self, tiny_config, tiny_dataset):
        experiment = Experiment(tiny_config, dataset=tiny_dataset)
        list(experiment.run())
        _, _, round_index = experiment.final_state()
        assert round_index == tiny_config.rounds

