"""
Co-Clustering Module

Server-side fuzzy c-means over ego-graph embeddings and item embeddings,
followed by group formation:
    - every user joins the group with its largest membership
    - every group receives its F highest-membership items as fake common items
      (or, in item_topk_mode, every item joins its F best groups)
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import structlog

from src.core.embeddings import RngStream, check_finite

logger = structlog.get_logger(__name__)

# Rows per distance block; bounds the (rows, C, d) temporary
_DISTANCE_BLOCK = 1024


@dataclass
class MembershipMatrix:
    """
    Fuzzy memberships, users first then items.

    Attributes:
        values: (N + M, C) array, rows sum to 1
        num_users: N
    """

    values: np.ndarray
    num_users: int

    @property
    def num_items(self) -> int:
        return self.values.shape[0] - self.num_users

    @property
    def num_groups(self) -> int:
        return self.values.shape[1]

    @property
    def users(self) -> np.ndarray:
        return self.values[: self.num_users]

    @property
    def items(self) -> np.ndarray:
        return self.values[self.num_users :]


@dataclass
class FCMResult:
    """Output of fcm_fit"""

    membership: np.ndarray
    centroids: np.ndarray
    objective_history: list[float]
    iterations: int
    converged: bool


@dataclass
class Group:
    """
    One group of the assignment.

    Attributes:
        group_id: Column index in the membership matrix
        users: Member user ids, ascending
        fake_items: Fake common item ids, best membership first
        fake_scores: Membership of each fake item in this group
    """

    group_id: int
    users: tuple[int, ...]
    fake_items: tuple[int, ...]
    fake_scores: tuple[float, ...] = ()

    @property
    def is_empty(self) -> bool:
        return len(self.users) == 0


@dataclass
class GroupAssignment:
    """Groups plus the user -> group index"""

    groups: list[Group]
    user_group: dict[int, int]
    membership: Optional[MembershipMatrix] = None
    centroids: Optional[np.ndarray] = None
    objective_history: list[float] = field(default_factory=list)

    def active_groups(self) -> list[Group]:
        """Groups with at least one user (the scheduler skips the rest)"""
        return [g for g in self.groups if not g.is_empty]

    def group_of(self, user_id: int) -> Group:
        return self.groups[self.user_group[user_id]]


# =============================================================================
# Fuzzy C-Means
# =============================================================================


def squared_distances(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(n, C) squared Euclidean distances, computed in fixed-size row blocks"""
    out = np.empty((X.shape[0], centroids.shape[0]))
    for start in range(0, X.shape[0], _DISTANCE_BLOCK):
        diff = X[start : start + _DISTANCE_BLOCK, None, :] - centroids[None, :, :]
        out[start : start + _DISTANCE_BLOCK] = np.einsum("ncd,ncd->nc", diff, diff)
    return out


def update_memberships(D2: np.ndarray, l: float) -> np.ndarray:
    """
    Membership update from squared distances.

    P_ij = d_ij^(2/(1-l)) / sum_k d_ik^(2/(1-l)). A point that coincides with
    one or more centroids gets membership 1 on the lowest-index coincident
    centroid and 0 elsewhere.
    """
    P = np.empty_like(D2)
    coincident = D2 == 0.0
    singular = coincident.any(axis=1)

    regular = ~singular
    if regular.any():
        d2 = D2[regular]
        # Scale by the row minimum so the largest weight is exactly 1
        weights = (d2 / d2.min(axis=1, keepdims=True)) ** (1.0 / (1.0 - l))
        P[regular] = weights / weights.sum(axis=1, keepdims=True)
    if singular.any():
        P[singular] = 0.0
        rows = np.flatnonzero(singular)
        P[rows, np.argmax(coincident[singular], axis=1)] = 1.0
    return P


def update_centroids(X: np.ndarray, P: np.ndarray, l: float, previous: np.ndarray) -> np.ndarray:
    """c_j = sum_i P_ij^l x_i / sum_i P_ij^l; a column with zero weight keeps its centroid"""
    W = P**l
    totals = W.sum(axis=0)
    centroids = previous.copy()
    live = totals > 0
    centroids[live] = (W[:, live].T @ X) / totals[live, None]
    return centroids


def objective(P: np.ndarray, D2: np.ndarray, l: float) -> float:
    """J_m = sum_ij P_ij^l d_ij^2"""
    return float(np.sum((P**l) * D2))


def kmeanspp_init(X: np.ndarray, C: int, rng: RngStream) -> np.ndarray:
    """Distance-weighted seeding: each next centroid is drawn with probability ~ D^2"""
    n = X.shape[0]
    chosen = [rng.integers(n)]
    closest = squared_distances(X, X[chosen])[:, 0]
    for _ in range(1, C):
        total = closest.sum()
        if total > 0:
            idx = int(rng.generator.choice(n, p=closest / total))
        else:
            idx = rng.integers(n)
        chosen.append(idx)
        closest = np.minimum(closest, squared_distances(X, X[[idx]])[:, 0])
    return X[chosen].copy()


def fcm_fit(
    X: np.ndarray,
    C: int,
    l: float,
    max_iters: int,
    tol: float,
    rng: RngStream,
) -> FCMResult:
    """
    Fit fuzzy c-means by alternating membership and centroid updates.

    Args:
        X: (N + M, d) points (ego embeddings then item embeddings)
        C: Number of groups (>= 2)
        l: Weighting exponent (> 1)
        max_iters: Iteration cap
        tol: Stop once max |delta P| < tol
        rng: Server stream for seeding

    Returns:
        FCMResult; objective_history holds J_m after every centroid update
        and is non-increasing.
    """
    X = check_finite("clustering input", np.asarray(X, dtype=np.float64))
    if C < 2:
        raise ValueError(f"Need at least 2 groups: {C}")
    if l <= 1:
        raise ValueError(f"Weighting exponent must be > 1: {l}")
    if X.shape[0] < C:
        raise ValueError(f"Need at least C={C} points, got {X.shape[0]}")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1: {max_iters}")

    centroids = kmeanspp_init(X, C, rng)
    P = update_memberships(squared_distances(X, centroids), l)

    history: list[float] = []
    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        centroids = update_centroids(X, P, l, centroids)
        D2 = squared_distances(X, centroids)
        history.append(objective(P, D2, l))

        P_next = update_memberships(D2, l)
        change = float(np.max(np.abs(P_next - P)))
        P = P_next
        if change < tol:
            converged = True
            break

    logger.debug(
        "Fuzzy c-means finished",
        points=X.shape[0],
        groups=C,
        iterations=iterations,
        converged=converged,
        objective=history[-1],
    )
    return FCMResult(
        membership=P,
        centroids=centroids,
        objective_history=history,
        iterations=iterations,
        converged=converged,
    )


# =============================================================================
# Group Formation
# =============================================================================


def _top_indices(scores: np.ndarray, count: int) -> np.ndarray:
    """Indices of the `count` largest scores; ties go to the lowest index"""
    order = np.lexsort((np.arange(len(scores)), -scores))
    return order[:count]


def assign_groups(P: MembershipMatrix, F: int, item_topk_mode: bool = False) -> GroupAssignment:
    """
    Turn fuzzy memberships into groups with fake common items.

    Args:
        P: Membership matrix (users then items)
        F: Fake items per group (per-item group count in item_topk_mode)
        item_topk_mode: Let each item join its F best groups instead

    Returns:
        GroupAssignment. Empty groups are kept.
    """
    if F < 0:
        raise ValueError(f"Fake item count must be >= 0: {F}")

    user_rows = P.users
    item_rows = P.items
    num_groups = P.num_groups

    user_choice = np.argmax(user_rows, axis=1)
    user_group = {int(u): int(g) for u, g in enumerate(user_choice)}
    rosters: list[list[int]] = [[] for _ in range(num_groups)]
    for u, g in user_group.items():
        rosters[g].append(u)

    fake: list[list[int]] = [[] for _ in range(num_groups)]
    if not item_topk_mode:
        if F > P.num_items:
            logger.warning("Fake item count exceeds catalog, clamping", requested=F, items=P.num_items)
            F = P.num_items
        for g in range(num_groups):
            fake[g] = [int(i) for i in _top_indices(item_rows[:, g], F)]
    else:
        if F > num_groups:
            logger.warning("Groups per item exceeds group count, clamping", requested=F, groups=num_groups)
            F = num_groups
        for i in range(P.num_items):
            for g in _top_indices(item_rows[i], F):
                fake[int(g)].append(i)
        for g in range(num_groups):
            scores = item_rows[fake[g], g]
            fake[g] = [fake[g][j] for j in _top_indices(scores, len(fake[g]))]

    groups = [
        Group(
            group_id=g,
            users=tuple(rosters[g]),
            fake_items=tuple(fake[g]),
            fake_scores=tuple(float(item_rows[i, g]) for i in fake[g]),
        )
        for g in range(num_groups)
    ]
    return GroupAssignment(groups=groups, user_group=user_group, membership=P)
