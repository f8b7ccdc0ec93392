"""Dataset ingestion, filtering, splitting and synthetic corpora"""

from .interactions import (
    InteractionReader,
    build_ego_graphs,
    filter_and_split,
    ingest,
    kcore_filter,
    read_idmap,
    write_idmap,
    write_interactions,
)
from .synthetic import make_block_dataset

__all__ = [
    "InteractionReader",
    "ingest",
    "kcore_filter",
    "filter_and_split",
    "build_ego_graphs",
    "write_idmap",
    "read_idmap",
    "write_interactions",
    "make_block_dataset",
]
