"""
Device Actor Module

On-device side of the protocol. A device keeps its ego graph private and
only ever sends:
    - its ego-graph embedding (LDP-protected) to the server
    - degree-normalized user messages c_u^(k) to group peers
    - an UploadBundle of LDP-protected item embeddings, positives mixed with
      fabricated negatives, to the server

Local training runs BPR over the device's rows of the group graph, with
peer messages held constant for the whole round. Gradients are computed
analytically by walking the linear propagation backwards.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import structlog

from src.core.embeddings import AdamState, RngStream, adam_step, check_finite, laplace_sample
from src.core.propagation import combine_layers, degree_norm, ego_embed, lgc_aggregate, scaled
from src.errors import DivergenceError, ProtocolError
from src.schema import EgoGraph, MessageKind, RoundMessage, UploadBundle

logger = structlog.get_logger(__name__)

VARIANCE_FLOOR = 1e-12


# =============================================================================
# Payloads
# =============================================================================


@dataclass
class ItemRows:
    """ItemFetch body: rows of the global item table"""

    item_ids: tuple[int, ...]
    embeddings: np.ndarray
    purpose: str = "private"  # private | fallback


@dataclass
class GroupNotice:
    """GroupNotify body: roster plus fake common items of the group"""

    group_id: int
    roster: tuple[int, ...]
    fake_items: tuple[int, ...]
    fake_embeddings: np.ndarray


@dataclass
class Broadcast:
    """
    NeighborBroadcast body.

    Attributes:
        user_id: Sender
        layer: k
        message: c_u^(k) = e_u^(k) / sqrt(deg(u))
        fake_links: Fake items the sender is connected to (layer 0 only)
    """

    user_id: int
    layer: int
    message: np.ndarray
    fake_links: Optional[tuple[int, ...]] = None


# =============================================================================
# State
# =============================================================================


@dataclass
class DeviceSettings:
    """Per-device hyperparameters"""

    num_items: int
    embedding_dim: int = 64
    layers: int = 4
    alphas: Optional[list[float]] = None
    lr: float = 0.001
    weight_decay: float = 0.0001
    local_epochs: int = 3
    neg_count: int = 1
    fallback_negatives: int = 1
    delta: float = 1.0
    ldp_lambda: float = 0.1

    def __post_init__(self):
        if self.alphas is None:
            self.alphas = [1.0 / (self.layers + 1)] * (self.layers + 1)


@dataclass
class DeviceState:
    """
    Everything a device holds.

    Attributes:
        ego: Private ego graph
        user_param: e_u^(0)
        item_params: (n, d) private item parameters, rows follow ego.items
        rng: Device stream
        num_items: Catalog size M (ids only)
        adam: Optimizer state per parameter block
        group_id: Current group, None before the first notification
        roster: Users of the current group
        fake_ids: Fake items this user links to (not held privately), ascending
        fake_params: (m, d) local copies of the linked fake items
        fallback_ids: Uniform non-interacted negatives drawn for this round
        fallback_params: (q, d) their embeddings
        neighbor_cache: layer -> peer -> c_v^(layer)
        neighbor_links: peer -> fake items it links to
        losses: BPR loss of every epoch of the current round
    """

    ego: EgoGraph
    user_param: np.ndarray
    item_params: np.ndarray
    rng: RngStream
    num_items: int
    adam: dict[str, AdamState] = field(default_factory=dict)
    group_id: Optional[int] = None
    roster: tuple[int, ...] = ()
    fake_ids: tuple[int, ...] = ()
    fake_params: Optional[np.ndarray] = None
    fallback_ids: tuple[int, ...] = ()
    fallback_params: Optional[np.ndarray] = None
    neighbor_cache: dict[int, dict[int, np.ndarray]] = field(default_factory=dict)
    neighbor_links: dict[int, tuple[int, ...]] = field(default_factory=dict)
    losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        dim = self.user_param.shape[0]
        if self.item_params.shape != (self.ego.n, dim):
            raise ValueError(
                f"item_params shape {self.item_params.shape} != {(self.ego.n, dim)}"
            )
        if self.fake_params is None:
            self.fake_params = np.zeros((0, dim))
        if self.fallback_params is None:
            self.fallback_params = np.zeros((0, dim))

    @property
    def user_id(self) -> int:
        return self.ego.user_id

    @property
    def dim(self) -> int:
        return int(self.user_param.shape[0])

    @property
    def item_map(self) -> dict[int, np.ndarray]:
        return dict(zip(self.ego.items, self.item_params))

    @property
    def fake_cache(self) -> dict[int, np.ndarray]:
        return dict(zip(self.fake_ids, self.fake_params))

    @property
    def peers(self) -> tuple[int, ...]:
        return tuple(u for u in self.roster if u != self.user_id)

    @property
    def user_degree(self) -> int:
        return self.ego.n + len(self.fake_ids)

    def fake_neighbors(self, item_id: int) -> list[int]:
        """Users linked to a fake item, this device included, ascending"""
        linked = [p for p in self.peers if item_id in self.neighbor_links.get(p, ())]
        return sorted([self.user_id, *linked])

    def clear_round(self) -> None:
        """Drop everything scoped to one round"""
        self.group_id = None
        self.roster = ()
        self.fake_ids = ()
        self.fake_params = np.zeros((0, self.dim))
        self.fallback_ids = ()
        self.fallback_params = np.zeros((0, self.dim))
        self.neighbor_cache = {}
        self.neighbor_links = {}
        self.adam.pop("fake", None)
        self.adam.pop("fallback", None)


@dataclass
class ForwardPass:
    """
    Device rows of the group propagation.

    Attributes:
        user_layers: e_u^(0..k)
        item_layers: private item blocks per layer
        fake_layers: linked fake item blocks per layer
        user_degree: deg(u)
        fake_degrees: deg(f) of every linked fake item
        user_final / item_finals / fake_finals / fallback_finals: combined
            embeddings (only when all K layers were computed)
    """

    user_layers: list[np.ndarray]
    item_layers: list[np.ndarray]
    fake_layers: list[np.ndarray]
    user_degree: int
    fake_degrees: np.ndarray
    user_final: Optional[np.ndarray] = None
    item_finals: Optional[np.ndarray] = None
    fake_finals: Optional[np.ndarray] = None
    fallback_finals: Optional[np.ndarray] = None

    def broadcast(self, layer: int) -> np.ndarray:
        """c_u^(layer)"""
        return scaled(self.user_layers[layer], self.user_degree)


@dataclass
class Gradients:
    """Loss gradients per parameter block"""

    user: np.ndarray
    items: np.ndarray
    fake: np.ndarray
    fallback: np.ndarray


# =============================================================================
# Forward / Backward
# =============================================================================


def _check_neighbor_layers(state: DeviceState, upto: int) -> None:
    if not state.fake_ids or upto == 0:
        return
    missing_links = [p for p in state.peers if p not in state.neighbor_links]
    if missing_links:
        raise ProtocolError(
            f"Device {state.user_id} has no link list from peer {missing_links[0]}"
        )
    linked_peers = {p for f in state.fake_ids for p in state.fake_neighbors(f)} - {state.user_id}
    for layer in range(upto):
        received = state.neighbor_cache.get(layer, {})
        for peer in sorted(linked_peers):
            if peer not in received:
                raise ProtocolError(
                    f"Device {state.user_id} missing layer {layer} broadcast from {peer}"
                )


def local_forward(
    state: DeviceState, K: int, alphas: list[float], upto: Optional[int] = None
) -> ForwardPass:
    """
    Compute this device's rows of the group propagation.

    Uses only local parameters plus cached peer broadcasts; the outcome is
    identical to the corresponding rows of group_propagate.

    Args:
        state: Device state with round caches populated
        K: Number of layers
        alphas: K + 1 layer weights
        upto: Stop after this layer (broadcast phase); None runs all K
            layers and fills in the combined embeddings

    Returns:
        ForwardPass
    """
    upto = K if upto is None else upto
    _check_neighbor_layers(state, upto)

    n = state.ego.n
    deg_u = state.user_degree
    fake_degrees = np.array([len(state.fake_neighbors(f)) for f in state.fake_ids], np.float64)

    users = [np.asarray(state.user_param, np.float64)]
    items = [np.asarray(state.item_params, np.float64)]
    fakes = [np.asarray(state.fake_params, np.float64)]

    for k in range(upto):
        own_message = scaled(users[k], deg_u)

        contributions = np.concatenate(
            [scaled(fakes[k], fake_degrees[:, None]), scaled(items[k], 1)]
        )
        users.append(lgc_aggregate(contributions, deg_u))

        item_row = lgc_aggregate(own_message[None, :], 1)
        items.append(np.repeat(item_row[None, :], n, axis=0))

        next_fakes = np.empty_like(fakes[k])
        for j, f in enumerate(state.fake_ids):
            rows = np.stack(
                [
                    own_message if v == state.user_id else state.neighbor_cache[k][v]
                    for v in state.fake_neighbors(f)
                ]
            )
            next_fakes[j] = lgc_aggregate(rows, fake_degrees[j])
        fakes.append(next_fakes)

    forward = ForwardPass(
        user_layers=users,
        item_layers=items,
        fake_layers=fakes,
        user_degree=deg_u,
        fake_degrees=fake_degrees,
    )
    if upto == K:
        forward.user_final = combine_layers(users, alphas)
        forward.item_finals = combine_layers(items, alphas)
        forward.fake_finals = combine_layers(fakes, alphas)
        fallback = np.asarray(state.fallback_params, np.float64)
        forward.fallback_finals = combine_layers([fallback] * (K + 1), alphas)
    return forward


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def bpr_loss_and_grads(
    state: DeviceState, forward: ForwardPass, alphas: list[float]
) -> tuple[float, Gradients]:
    """
    BPR loss over (private item, negative) pairs and its gradients.

    Negatives are the linked fake common items followed by the uniformly
    drawn fallback items. Peer broadcasts are constants. The L2 term is
    left to the optimizer's weight decay.

    Args:
        state: Device state
        forward: Full forward pass (all K layers)
        alphas: Layer weights used by the forward pass

    Returns:
        (loss, gradients w.r.t. every layer-0 parameter block)
    """
    if forward.user_final is None:
        raise ValueError("bpr_loss_and_grads needs a complete forward pass")

    num_fake = forward.fake_finals.shape[0]
    negatives = np.concatenate([forward.fake_finals, forward.fallback_finals])
    if negatives.shape[0] == 0:
        raise ProtocolError(f"Device {state.user_id} has no negative items")

    e_u = forward.user_final
    positives = forward.item_finals
    y_pos = positives @ e_u
    y_neg = negatives @ e_u
    margin = y_pos[:, None] - y_neg[None, :]
    loss = float(-np.sum(_log_sigmoid(margin)))

    # dL/dmargin = -sigmoid(-margin)
    d_margin = -_sigmoid(-margin)
    d_pos = d_margin.sum(axis=1)
    d_neg = -d_margin.sum(axis=0)

    d_user_final = d_pos @ positives + d_neg @ negatives
    d_item_finals = d_pos[:, None] * e_u[None, :]
    d_neg_finals = d_neg[:, None] * e_u[None, :]

    d_fake_finals = d_neg_finals[:num_fake]
    d_fallback_finals = d_neg_finals[num_fake:]

    # Walk the layers backwards; g_* hold gradients w.r.t. layer k + 1
    K = len(alphas) - 1
    norm_u = degree_norm(forward.user_degree)
    norm_f = degree_norm(forward.fake_degrees)[:, None]
    g_user = alphas[K] * d_user_final
    g_items = alphas[K] * d_item_finals
    g_fake = alphas[K] * d_fake_finals
    for k in range(K - 1, -1, -1):
        next_user = (
            alphas[k] * d_user_final
            + g_items.sum(axis=0) / norm_u
            + (g_fake / norm_f).sum(axis=0) / norm_u
        )
        next_items = alphas[k] * d_item_finals + np.repeat((g_user / norm_u)[None, :], state.ego.n, 0)
        next_fake = alphas[k] * d_fake_finals + g_user[None, :] / (norm_f * norm_u)
        g_user, g_items, g_fake = next_user, next_items, next_fake

    grads = Gradients(
        user=g_user,
        items=g_items,
        fake=g_fake,
        fallback=float(sum(alphas)) * d_fallback_finals,
    )
    return loss, grads


# =============================================================================
# Training
# =============================================================================


def _adam_for(state: DeviceState, block: str, param: np.ndarray, settings: DeviceSettings) -> AdamState:
    current = state.adam.get(block)
    if current is None or current.m.shape != param.shape:
        current = AdamState.zeros_like(param, lr=settings.lr, weight_decay=settings.weight_decay)
        state.adam[block] = current
    return current


def local_train(
    state: DeviceState,
    epochs: int,
    settings: DeviceSettings,
    lr: Optional[float] = None,
) -> DeviceState:
    """
    Run `epochs` rounds of forward -> BPR -> Adam on the device parameters.

    Peer broadcasts stay fixed. Updates e_u^(0), private items, linked fake
    copies and fallback negatives. Epoch losses land in state.losses.

    Args:
        state: Device state with round caches populated
        epochs: Local epochs (0 leaves the state untouched)
        settings: Hyperparameters
        lr: Optional learning-rate override

    Returns:
        The updated state
    """
    K = settings.layers
    alphas = settings.alphas
    for epoch in range(epochs):
        forward = local_forward(state, K, alphas)
        loss, grads = bpr_loss_and_grads(state, forward, alphas)
        if not np.isfinite(loss):
            logger.error("Local training diverged", user=state.user_id, epoch=epoch)
            raise DivergenceError(f"Loss diverged on device {state.user_id} at epoch {epoch}")
        state.losses.append(loss)

        blocks = [
            ("user", "user_param", grads.user),
            ("items", "item_params", grads.items),
            ("fake", "fake_params", grads.fake),
            ("fallback", "fallback_params", grads.fallback),
        ]
        for block, attr, grad in blocks:
            param = getattr(state, attr)
            if param.size == 0:
                continue
            new_param, state.adam[block] = adam_step(
                param, grad, _adam_for(state, block, param, settings), lr=lr
            )
            setattr(state, attr, new_param)
    return state


# =============================================================================
# Privacy
# =============================================================================


def non_interacted(state: DeviceState) -> np.ndarray:
    """Catalog ids the device has not interacted with, ascending"""
    return np.setdiff1d(np.arange(state.num_items), np.asarray(state.ego.items))


def sample_item_ids(state: DeviceState, count: int, exclude: tuple[int, ...] = ()) -> list[int]:
    """Uniformly sample distinct non-interacted ids, clamping to what exists"""
    candidates = non_interacted(state)
    if exclude:
        candidates = np.setdiff1d(candidates, np.asarray(exclude))
    if count > len(candidates):
        logger.warning(
            "Not enough non-interacted items, clamping",
            user=state.user_id,
            requested=count,
            available=len(candidates),
        )
        count = len(candidates)
    if count == 0:
        return []
    return sorted(int(i) for i in state.rng.choice(candidates, count))


def fabricate_negatives(state: DeviceState, count: int) -> list[tuple[int, np.ndarray]]:
    """
    Camouflage embeddings for non-interacted items.

    Each embedding is Gaussian per dimension with the mean and variance of
    the device's current private item parameters. Dimensions whose variance
    does not exceed the floor are set to the mean exactly.

    Args:
        state: Device state
        count: Number of fabricated items

    Returns:
        (item_id, embedding) pairs, ids ascending and disjoint from ego.items
    """
    if count < 0:
        raise ValueError(f"Negative count must be >= 0: {count}")
    ids = sample_item_ids(state, count)
    mean = state.item_params.mean(axis=0)
    var = state.item_params.var(axis=0)
    std = np.where(var > VARIANCE_FLOOR, np.sqrt(np.maximum(var, 0.0)), 0.0)
    return [(item_id, state.rng.normal(mean, std)) for item_id in ids]


def apply_ldp(v: np.ndarray, delta: float, lam: float, rng: RngStream) -> np.ndarray:
    """
    Clip to L1 norm delta, then add Laplace(0, lam) noise.

    Args:
        v: Embedding to protect
        delta: L1 threshold (> 0)
        lam: Noise scale (>= 0)
        rng: Caller's stream

    Returns:
        clip(v, delta) + Laplace(0, lam)
    """
    if delta <= 0:
        raise ValueError(f"Clip threshold must be positive: {delta}")
    l1 = float(np.abs(v).sum())
    clipped = v * (delta / l1) if l1 > delta else np.array(v, dtype=np.float64)
    if lam == 0:
        return clipped
    return clipped + laplace_sample(rng, lam, v.shape[0])


def make_upload(state: DeviceState, settings: DeviceSettings) -> UploadBundle:
    """
    Build the post-training upload: combined e_u, trained private items and
    fabricated negatives, each LDP-protected.
    """
    forward = local_forward(state, settings.layers, settings.alphas)
    delta, lam = settings.delta, settings.ldp_lambda

    ego = apply_ldp(forward.user_final, delta, lam, state.rng)
    positives = [
        (item_id, apply_ldp(row, delta, lam, state.rng))
        for item_id, row in zip(state.ego.items, state.item_params)
    ]
    fabricated = [
        (item_id, apply_ldp(row, delta, lam, state.rng))
        for item_id, row in fabricate_negatives(state, settings.neg_count)
    ]
    return UploadBundle(
        device_id=state.user_id,
        ego_embedding=check_finite("ego upload", ego),
        positives=positives,
        fabricated=fabricated,
    )


# =============================================================================
# Actor
# =============================================================================


class DeviceActor:
    """
    Message-driven wrapper around DeviceState.

    The simulator delivers bus messages through handle(); every outgoing
    message is built here so payload sizes match what is serialized.
    """

    def __init__(self, state: DeviceState, settings: DeviceSettings):
        """
        Initialize a device actor.

        Args:
            state: Initial device state
            settings: Hyperparameters shared by all devices
        """
        self.state = state
        self.settings = settings

    @property
    def user_id(self) -> int:
        return self.state.user_id

    @property
    def address(self) -> str:
        return f"device:{self.state.user_id}"

    # -- inbound -------------------------------------------------------------

    def handle(self, message: RoundMessage) -> None:
        kind = message.kind
        if kind == MessageKind.ITEM_FETCH:
            self._on_item_rows(message.payload)
        elif kind == MessageKind.GROUP_NOTIFY:
            self._on_group_notice(message.payload)
        elif kind == MessageKind.NEIGHBOR_BROADCAST:
            self._on_broadcast(message.payload)
        else:
            raise ProtocolError(f"{self.address} cannot handle {kind.value}")

    def _on_item_rows(self, rows: ItemRows) -> None:
        if rows.embeddings.shape[1:] != (self.state.dim,):
            raise ProtocolError(f"{self.address} received rows of shape {rows.embeddings.shape}")
        if rows.purpose == "private":
            if tuple(rows.item_ids) != self.state.ego.items:
                raise ProtocolError(f"{self.address} received rows for the wrong items")
            self.state.item_params = np.array(rows.embeddings, dtype=np.float64)
        else:
            self.state.fallback_ids = tuple(rows.item_ids)
            self.state.fallback_params = np.array(rows.embeddings, dtype=np.float64)

    def _on_group_notice(self, notice: GroupNotice) -> None:
        if self.user_id not in notice.roster:
            raise ProtocolError(f"{self.address} notified for group {notice.group_id}")
        private = set(self.state.ego.items)
        linked = [
            (f, row)
            for f, row in sorted(zip(notice.fake_items, notice.fake_embeddings), key=lambda p: p[0])
            if f not in private
        ]
        self.state.group_id = notice.group_id
        self.state.roster = tuple(sorted(notice.roster))
        self.state.fake_ids = tuple(f for f, _ in linked)
        self.state.fake_params = (
            np.stack([np.array(row, dtype=np.float64) for _, row in linked])
            if linked
            else np.zeros((0, self.state.dim))
        )

    def _on_broadcast(self, broadcast: Broadcast) -> None:
        if broadcast.user_id not in self.state.roster:
            raise ProtocolError(f"{self.address} got a broadcast from outside its group")
        if broadcast.fake_links is not None:
            self.state.neighbor_links[broadcast.user_id] = tuple(broadcast.fake_links)
        self.state.neighbor_cache.setdefault(broadcast.layer, {})[broadcast.user_id] = np.array(
            broadcast.message, dtype=np.float64
        )

    # -- outbound ------------------------------------------------------------

    def needs_fallback(self) -> bool:
        """Uniform negatives are fetched whenever the device trains"""
        return self.settings.local_epochs > 0

    def choose_fallback(self) -> list[int]:
        return sample_item_ids(self.state, self.settings.fallback_negatives, exclude=self.state.fake_ids)

    def ego_upload(self, round_index: int) -> RoundMessage:
        """Ego-graph embedding from freshly fetched item rows, LDP-protected"""
        embedding = ego_embed(self.state.ego, self.state.item_map)
        protected = apply_ldp(embedding, self.settings.delta, self.settings.ldp_lambda, self.state.rng)
        return RoundMessage(
            kind=MessageKind.EGO_UPLOAD,
            src=self.address,
            dst="server",
            payload_params=self.state.dim,
            round=round_index,
            payload=(self.user_id, check_finite("ego upload", protected)),
        )

    def broadcast(self, round_index: int, layer: int, group_address: str) -> RoundMessage:
        forward = local_forward(self.state, self.settings.layers, self.settings.alphas, upto=layer)
        peers = len(self.state.peers)
        body = Broadcast(
            user_id=self.user_id,
            layer=layer,
            message=forward.broadcast(layer),
            fake_links=self.state.fake_ids if layer == 0 else None,
        )
        return RoundMessage(
            kind=MessageKind.NEIGHBOR_BROADCAST,
            src=self.address,
            dst=group_address,
            payload_params=self.state.dim * peers,
            round=round_index,
            layer=layer,
            fanout=peers,
            payload=body,
        )

    def train(self, lr: Optional[float] = None) -> Optional[float]:
        """Local epochs; returns the mean epoch loss (None when nothing ran)"""
        self.state.losses = []
        local_train(self.state, self.settings.local_epochs, self.settings, lr=lr)
        if not self.state.losses:
            return None
        return float(np.mean(self.state.losses))

    def upload(self, round_index: int) -> RoundMessage:
        bundle = make_upload(self.state, self.settings)
        return RoundMessage(
            kind=MessageKind.ITEM_UPLOAD,
            src=self.address,
            dst="server",
            payload_params=bundle.num_params,
            round=round_index,
            payload=bundle,
        )

    def end_round(self) -> None:
        self.state.clear_round()
