"""Simulator records and configuration"""

from .experiment_config import ExperimentConfig, RuntimeSettings, load_config
from .federated_schema import (
    LEDGER_COLUMNS,
    MESSAGE_DIRECTIONS,
    REPORT_COLUMNS,
    Dataset,
    Direction,
    EgoGraph,
    Interaction,
    LedgerRow,
    MessageKind,
    MetricsReport,
    RoundMessage,
    UploadBundle,
)

__all__ = [
    "Interaction",
    "Dataset",
    "EgoGraph",
    "MessageKind",
    "Direction",
    "MESSAGE_DIRECTIONS",
    "RoundMessage",
    "UploadBundle",
    "LedgerRow",
    "MetricsReport",
    "REPORT_COLUMNS",
    "LEDGER_COLUMNS",
    "ExperimentConfig",
    "RuntimeSettings",
    "load_config",
]
