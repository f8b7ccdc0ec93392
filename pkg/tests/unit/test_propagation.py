"""Tests for LGC propagation and its dense oracle"""

import networkx as nx
import numpy as np
import pytest

from src.core.propagation import (
    GroupGraph,
    combine_layers,
    ego_embed,
    fake_node,
    group_propagate,
    oracle_centralized_lgc,
    private_node,
    uniform_alphas,
    user_node,
)
from src.errors import ProtocolError
from src.schema import EgoGraph
from tests.conftest import random_group

pytestmark = pytest.mark.unit


def _power_oracle(gg: GroupGraph, init: dict, K: int, alphas: list[float]) -> dict:
    """Dense (D^-1/2 A D^-1/2)^k iteration"""
    nodes = gg.nodes()
    graph = nx.Graph()
    graph.add_nodes_from(nodes)
    graph.add_edges_from(gg.edges())
    A = nx.to_numpy_array(graph, nodelist=nodes)
    inv_sqrt = 1.0 / np.sqrt(A.sum(axis=1))
    norm = inv_sqrt[:, None] * A * inv_sqrt[None, :]
    E = np.stack([init[n] for n in nodes])
    layers = [E]
    for _ in range(K):
        layers.append(norm @ layers[-1])
    combined = sum(a * layer for a, layer in zip(alphas, layers))
    return {node: combined[i] for i, node in enumerate(nodes)}


class TestEgoEmbed:
    def test_single_item(self):
        e = np.array([0.3, -1.2, 2.0])
        assert np.array_equal(ego_embed(EgoGraph(0, (5,)), {5: e}), e)

    def test_two_items(self):
        a, b = np.array([1.0, 2.0]), np.array([-0.5, 4.0])
        result = ego_embed(EgoGraph(0, (1, 2)), {1: a, 2: b})
        assert np.allclose(result, (a + b) / np.sqrt(2))

    def test_three_items_match_normalized_adjacency(self):
        embs = {i: np.arange(3, dtype=float) + i for i in (2, 4, 9)}
        # user row of D^-1/2 A D^-1/2: 1 / (sqrt(3) * sqrt(1)) per item
        expected = sum(embs.values()) / np.sqrt(3)
        assert np.allclose(ego_embed(EgoGraph(1, (2, 4, 9)), embs), expected)

    def test_missing_item_named(self):
        with pytest.raises(ProtocolError, match="item 4"):
            ego_embed(EgoGraph(1, (2, 4)), {2: np.zeros(2)})


class TestGroupGraph:
    def test_fake_item_held_privately_gets_no_edge(self):
        gg = GroupGraph(members=[(0, (1, 2)), (1, (3,))], fake_items=(2, 7))
        assert gg.links(0) == (7,)
        assert gg.links(1) == (2, 7)
        assert gg.fake_degree(2) == 1
        assert gg.fake_degree(7) == 2
        assert gg.user_degree(0) == 3
        assert gg.user_degree(1) == 3

    def test_node_order(self):
        gg = GroupGraph(members=[(5, (2,)), (1, (4, 3))], fake_items=(9,))
        assert gg.nodes() == [
            user_node(1),
            user_node(5),
            fake_node(9),
            private_node(1, 3),
            private_node(1, 4),
            private_node(5, 2),
        ]

    def test_duplicate_user_rejected(self):
        with pytest.raises(ValueError):
            GroupGraph(members=[(0, (1,)), (0, (2,))], fake_items=())


class TestGroupPropagate:
    def test_single_user_single_item(self):
        gg = GroupGraph(members=[(0, (3,))], fake_items=())
        e_u, e_i = np.array([1.0, 0.0]), np.array([0.0, 2.0])
        stack = group_propagate(gg, {user_node(0): e_u, private_node(0, 3): e_i}, K=1, alphas=[0.5, 0.5])
        assert np.allclose(stack.combined[user_node(0)], 0.5 * e_u + 0.5 * e_i)

    def test_constant_layers_combine_to_value(self):
        v = np.array([0.25, -3.0, 1.5])
        layers = [v.copy() for _ in range(5)]
        assert np.allclose(combine_layers(layers, uniform_alphas(4)), v)

    def test_bitwise_equal_to_oracle(self, np_rng):
        for _ in range(200):
            gg, init = random_group(np_rng)
            K = int(np_rng.integers(1, 5))
            alphas = uniform_alphas(K)
            fast = group_propagate(gg, init, K, alphas)
            slow = oracle_centralized_lgc(gg, init, K, alphas)
            for node in gg.nodes():
                for a, b in zip(fast.layers[node], slow.layers[node]):
                    assert np.array_equal(a, b)
                assert np.array_equal(fast.combined[node], slow.combined[node])

    def test_two_users_one_fake_matches_matrix_power(self):
        gg = GroupGraph(members=[(0, (1, 2)), (1, (3,))], fake_items=(9,))
        gen = np.random.default_rng(0)
        init = {node: gen.normal(size=4) for node in gg.nodes()}
        alphas = uniform_alphas(2)
        stack = group_propagate(gg, init, 2, alphas)
        expected = _power_oracle(gg, init, 2, alphas)
        for node in gg.nodes():
            assert np.allclose(stack.combined[node], expected[node], atol=1e-12)

    def test_random_groups_match_matrix_power(self, np_rng):
        for _ in range(50):
            gg, init = random_group(np_rng, catalog=6)
            # fake items outside every private list keep all degrees positive
            gg = GroupGraph(members=gg.members, fake_items=(100, 101)[: len(gg.fake_items) % 3])
            init = {node: np_rng.normal(size=3) for node in gg.nodes()}
            K = 3
            stack = group_propagate(gg, init, K, uniform_alphas(K))
            expected = _power_oracle(gg, init, K, uniform_alphas(K))
            for node in gg.nodes():
                assert np.allclose(stack.combined[node], expected[node], atol=1e-10)

    def test_zero_degree_fake_keeps_layer_zero(self):
        gg = GroupGraph(members=[(0, (4,))], fake_items=(4,))
        init = {user_node(0): np.ones(2), fake_node(4): np.array([3.0, -1.0]), private_node(0, 4): np.zeros(2)}
        stack = group_propagate(gg, init, 3, uniform_alphas(3))
        assert all(np.array_equal(layer, init[fake_node(4)]) for layer in stack.layers[fake_node(4)])

    def test_linear(self, np_rng):
        for _ in range(20):
            gg, init1 = random_group(np_rng)
            init2 = {node: np_rng.normal(size=3) for node in init1}
            a, b = 1.7, -0.4
            mixed = {node: a * init1[node] + b * init2[node] for node in init1}
            out1 = group_propagate(gg, init1, 3, uniform_alphas(3))
            out2 = group_propagate(gg, init2, 3, uniform_alphas(3))
            out = group_propagate(gg, mixed, 3, uniform_alphas(3))
            for node in gg.nodes():
                expected = a * out1.combined[node] + b * out2.combined[node]
                assert np.allclose(out.combined[node], expected, atol=1e-9)

    def test_member_order_irrelevant(self, np_rng):
        gg, init = random_group(np_rng, max_users=4)
        reversed_gg = GroupGraph(members=list(reversed(gg.members)), fake_items=tuple(reversed(gg.fake_items)))
        a = group_propagate(gg, init, 2, uniform_alphas(2))
        b = group_propagate(reversed_gg, init, 2, uniform_alphas(2))
        for node in gg.nodes():
            assert np.array_equal(a.combined[node], b.combined[node])

    def test_missing_init(self):
        gg = GroupGraph(members=[(0, (1,))], fake_items=())
        with pytest.raises(ProtocolError):
            group_propagate(gg, {user_node(0): np.zeros(2)}, 1, uniform_alphas(1))

    def test_bad_alphas(self):
        gg = GroupGraph(members=[(0, (1,))], fake_items=())
        init = {user_node(0): np.zeros(2), private_node(0, 1): np.zeros(2)}
        with pytest.raises(ValueError):
            group_propagate(gg, init, 2, [0.5, 0.5])
        with pytest.raises(ValueError):
            group_propagate(gg, init, 0, [1.0])


class TestOracle:
    def test_isolated_fake_node_stays_constant(self):
        gg = GroupGraph(members=[(0, (2,))], fake_items=(2,))
        init = {node: np.full(2, float(i)) for i, node in enumerate(gg.nodes())}
        stack = oracle_centralized_lgc(gg, init, 4, uniform_alphas(4))
        assert all(np.array_equal(layer, init[fake_node(2)]) for layer in stack.layers[fake_node(2)])

    def test_star_symmetry(self):
        gg = GroupGraph(members=[(0, (1, 2, 3))], fake_items=())
        base = {user_node(0): np.array([1.0, 0.0]), private_node(0, 1): np.array([0.0, 1.0]),
                private_node(0, 2): np.array([2.0, 1.0]), private_node(0, 3): np.array([-1.0, 0.5])}
        permuted = dict(base)
        permuted[private_node(0, 1)], permuted[private_node(0, 3)] = base[private_node(0, 3)], base[private_node(0, 1)]
        a = oracle_centralized_lgc(gg, base, 2, uniform_alphas(2))
        b = oracle_centralized_lgc(gg, permuted, 2, uniform_alphas(2))
        assert np.allclose(a.combined[user_node(0)], b.combined[user_node(0)], atol=1e-12)
