"""Numeric kernels, co-clustering, propagation and the protocol actors"""

from .clustering import GroupAssignment, MembershipMatrix, assign_groups, fcm_fit
from .device import DeviceActor, DeviceSettings, DeviceState, apply_ldp, fabricate_negatives, local_train
from .embeddings import AdamState, RngStream, adam_step, laplace_sample, xavier_init
from .metrics import evaluate, ndcg_at_k, recall_at_k
from .propagation import GroupGraph, ego_embed, group_propagate, oracle_centralized_lgc
from .server import EgoRegistry, ItemTable, ServerActor, fedavg_items, rank_topk, recluster

__all__ = [
    "RngStream",
    "xavier_init",
    "laplace_sample",
    "AdamState",
    "adam_step",
    "MembershipMatrix",
    "GroupAssignment",
    "fcm_fit",
    "assign_groups",
    "GroupGraph",
    "ego_embed",
    "group_propagate",
    "oracle_centralized_lgc",
    "DeviceState",
    "DeviceSettings",
    "DeviceActor",
    "local_train",
    "fabricate_negatives",
    "apply_ldp",
    "ItemTable",
    "EgoRegistry",
    "ServerActor",
    "fedavg_items",
    "recluster",
    "rank_topk",
    "evaluate",
    "recall_at_k",
    "ndcg_at_k",
]
