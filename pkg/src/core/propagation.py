"""
LGC Propagation Module

Light graph convolution over user-item bipartite graphs:
    - ego_embed: one hop over an isolated ego graph
    - group_propagate: K layers over a glued group graph + layer combination
    - oracle_centralized_lgc: dense-adjacency reference used by tests

Every path accumulates neighbor contributions through lgc_aggregate() with
neighbors in ascending node order, so all three agree bit for bit.
"""

from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Callable

import networkx as nx
import numpy as np
import structlog

from src.errors import ProtocolError
from src.schema import EgoGraph

logger = structlog.get_logger(__name__)

# Node keys of a group graph
Node = tuple
AggregationFn = Callable[[np.ndarray, float], np.ndarray]

ORACLE_MAX_NODES = 10_000


def user_node(user_id: int) -> Node:
    return ("user", user_id)


def fake_node(item_id: int) -> Node:
    return ("fake", item_id)


def private_node(user_id: int, item_id: int) -> Node:
    return ("private", user_id, item_id)


# =============================================================================
# Kernels (shared by server-side, device-side and oracle propagation)
# =============================================================================


def degree_norm(degree) -> np.ndarray:
    """sqrt(|N(v)|); accepts a scalar or an array of degrees"""
    return np.sqrt(np.asarray(degree, dtype=np.float64))


def scaled(embedding: np.ndarray, degree: float) -> np.ndarray:
    """Degree-normalized outgoing message e / sqrt(deg); works row-wise on blocks"""
    return embedding / degree_norm(degree)


def lgc_aggregate(contributions: np.ndarray, degree: float) -> np.ndarray:
    """
    Sum pre-scaled neighbor messages (rows, in the given order) and normalize.

    Args:
        contributions: (r, d) array, one row per neighbor
        degree: Degree of the receiving node

    Returns:
        sum_rows / sqrt(degree)
    """
    stacked = np.ascontiguousarray(contributions, dtype=np.float64)
    return np.add.reduce(stacked, axis=0) / degree_norm(degree)


LGC_AGGREGATION: AggregationFn = lgc_aggregate


def combine_layers(layers: Sequence[np.ndarray], alphas: Sequence[float]) -> np.ndarray:
    """Layer combination sum_k alpha_k e^(k), accumulated in layer order"""
    if len(layers) != len(alphas):
        raise ValueError(f"{len(layers)} layers but {len(alphas)} alphas")
    combined = alphas[0] * layers[0]
    for alpha, layer in zip(alphas[1:], layers[1:]):
        combined = combined + alpha * layer
    return combined


def uniform_alphas(num_layers: int) -> list[float]:
    return [1.0 / (num_layers + 1)] * (num_layers + 1)


def _check_alphas(alphas: Sequence[float], num_layers: int) -> None:
    if len(alphas) != num_layers + 1:
        raise ValueError(f"Need {num_layers + 1} alphas, got {len(alphas)}")
    if abs(sum(alphas) - 1.0) > 1e-9:
        raise ValueError(f"alphas must sum to 1, got {sum(alphas)}")


# =============================================================================
# Ego Graph
# =============================================================================


def ego_embed(g: EgoGraph, item_embs: dict[int, np.ndarray]) -> np.ndarray:
    """
    Ego-graph embedding from one LGC hop without layer combination.

    Inside an isolated ego graph every item has degree 1, so this is
    sum_i e_i / sqrt(n).

    Args:
        g: The device's ego graph
        item_embs: Embedding of every item in g

    Returns:
        e_ego
    """
    missing = [item for item in g.items if item not in item_embs]
    if missing:
        raise ProtocolError(f"Missing embedding for item {missing[0]} of user {g.user_id}")

    rows = np.stack([scaled(item_embs[item], 1) for item in g.items])
    return lgc_aggregate(rows, g.n)


# =============================================================================
# Group Graph
# =============================================================================


@dataclass
class GroupGraph:
    """
    Ego graphs of one group glued by fake common items.

    A user links to every fake item it does not already hold privately;
    private item nodes belong to exactly one user.

    Attributes:
        members: (user_id, private items) pairs
        fake_items: Fake common item ids
    """

    members: list[tuple[int, tuple[int, ...]]]
    fake_items: tuple[int, ...]
    _links: dict[int, tuple[int, ...]] = field(init=False, repr=False)
    _fake_users: dict[int, tuple[int, ...]] = field(init=False, repr=False)

    def __post_init__(self):
        self.members = sorted((int(u), tuple(sorted(items))) for u, items in self.members)
        self.fake_items = tuple(sorted(set(self.fake_items)))
        users = [u for u, _ in self.members]
        if len(set(users)) != len(users):
            raise ValueError("Duplicate user in group graph")

        self._links = {
            u: tuple(f for f in self.fake_items if f not in set(items)) for u, items in self.members
        }
        self._fake_users = {
            f: tuple(u for u, _ in self.members if f in self._links[u]) for f in self.fake_items
        }

    @property
    def users(self) -> list[int]:
        return [u for u, _ in self.members]

    def private_items(self, user_id: int) -> tuple[int, ...]:
        return dict(self.members)[user_id]

    def links(self, user_id: int) -> tuple[int, ...]:
        """Fake items connected to the user, ascending"""
        return self._links[user_id]

    def fake_users(self, item_id: int) -> tuple[int, ...]:
        """Users connected to a fake item, ascending"""
        return self._fake_users[item_id]

    def user_degree(self, user_id: int) -> int:
        return len(self.private_items(user_id)) + len(self._links[user_id])

    def fake_degree(self, item_id: int) -> int:
        return len(self._fake_users[item_id])

    def nodes(self) -> list[Node]:
        """Canonical node order: users, fake items, private items by (user, item)"""
        order = [user_node(u) for u in self.users]
        order += [fake_node(f) for f in self.fake_items]
        order += [private_node(u, i) for u, items in self.members for i in items]
        return order

    def edges(self) -> list[tuple[Node, Node]]:
        result = []
        for u, items in self.members:
            result += [(user_node(u), fake_node(f)) for f in self._links[u]]
            result += [(user_node(u), private_node(u, i)) for i in items]
        return result


@dataclass
class LayerStack:
    """
    Per-node layer embeddings and their combination.

    Attributes:
        layers: node -> [e^(0), ..., e^(K)]
        alphas: Layer weights (sum to 1)
        combined: node -> sum_k alpha_k e^(k)
    """

    layers: dict[Node, list[np.ndarray]]
    alphas: list[float]
    combined: dict[Node, np.ndarray]


def _user_contributions(gg: GroupGraph, current: dict[Node, np.ndarray], u: int) -> np.ndarray:
    rows = [scaled(current[fake_node(f)], gg.fake_degree(f)) for f in gg.links(u)]
    rows += [scaled(current[private_node(u, i)], 1) for i in gg.private_items(u)]
    return np.stack(rows)


def group_propagate(
    gg: GroupGraph,
    init: dict[Node, np.ndarray],
    K: int,
    alphas: Sequence[float],
    aggregate: AggregationFn = LGC_AGGREGATION,
) -> LayerStack:
    """
    Run K synchronous LGC layers over a group graph and combine layers.

    Args:
        gg: Group graph
        init: Layer-0 embedding of every node (see GroupGraph.nodes)
        K: Number of layers (>= 1)
        alphas: K + 1 layer weights
        aggregate: Neighbor aggregation; only LGC ships

    Returns:
        LayerStack. Zero-degree fake items keep their layer-0 embedding.
    """
    if K < 1:
        raise ValueError(f"K must be >= 1: {K}")
    _check_alphas(alphas, K)
    nodes = gg.nodes()
    missing = [node for node in nodes if node not in init]
    if missing:
        raise ProtocolError(f"Missing layer-0 embedding for node {missing[0]}")

    layers: dict[Node, list[np.ndarray]] = {node: [np.asarray(init[node], np.float64)] for node in nodes}

    for k in range(K):
        current = {node: stack[k] for node, stack in layers.items()}
        for u, items in gg.members:
            layers[user_node(u)].append(
                aggregate(_user_contributions(gg, current, u), gg.user_degree(u))
            )
            message = scaled(current[user_node(u)], gg.user_degree(u))
            for i in items:
                layers[private_node(u, i)].append(aggregate(message[None, :], 1))
        for f in gg.fake_items:
            degree = gg.fake_degree(f)
            if degree == 0:
                layers[fake_node(f)].append(layers[fake_node(f)][0])
                continue
            rows = np.stack(
                [scaled(current[user_node(v)], gg.user_degree(v)) for v in gg.fake_users(f)]
            )
            layers[fake_node(f)].append(aggregate(rows, degree))

    combined = {node: combine_layers(stack, alphas) for node, stack in layers.items()}
    return LayerStack(layers=layers, alphas=list(alphas), combined=combined)


def oracle_centralized_lgc(
    gg: GroupGraph, init: dict[Node, np.ndarray], K: int, alphas: Sequence[float]
) -> LayerStack:
    """
    Dense-adjacency reference for group_propagate (tests only).

    Builds the bipartite adjacency matrix with networkx and walks its rows,
    accumulating columns in ascending node order.

    The oracle reuses scaled() and lgc_aggregate(), so a bug in those kernels
    would show up identically here and in group_propagate. The unit tests
    also check group_propagate against a plain (D^-1/2 A D^-1/2)^k matrix
    power that uses neither kernel.
    """
    if K < 1:
        raise ValueError(f"K must be >= 1: {K}")
    _check_alphas(alphas, K)
    nodes = gg.nodes()
    if len(nodes) > ORACLE_MAX_NODES:
        raise ValueError(f"Oracle limited to {ORACLE_MAX_NODES} nodes, got {len(nodes)}")

    graph = nx.Graph()
    graph.add_nodes_from(nodes)
    graph.add_edges_from(gg.edges())
    adjacency = nx.to_numpy_array(graph, nodelist=nodes, dtype=np.float64)
    degrees = adjacency.sum(axis=1)

    embeddings = np.stack([np.asarray(init[node], np.float64) for node in nodes])
    history = [embeddings]
    for _ in range(K):
        current = history[-1]
        nxt = np.empty_like(current)
        for row in range(len(nodes)):
            neighbors = np.flatnonzero(adjacency[row])
            if len(neighbors) == 0:
                nxt[row] = embeddings[row]
                continue
            rows = np.stack([scaled(current[col], degrees[col]) for col in neighbors])
            nxt[row] = lgc_aggregate(rows, degrees[row])
        history.append(nxt)

    layers = {node: [layer[idx] for layer in history] for idx, node in enumerate(nodes)}
    combined = {node: combine_layers(stack, alphas) for node, stack in layers.items()}
    return LayerStack(layers=layers, alphas=list(alphas), combined=combined)
