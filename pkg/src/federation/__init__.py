"""Message bus and round scheduler"""

from .bus import CommLedger, MessageBus, Transcript, group_address
from .simulation import Experiment, World, build_world, initialize, load_dataset, run_experiment, run_round

__all__ = [
    "MessageBus",
    "CommLedger",
    "Transcript",
    "group_address",
    "World",
    "Experiment",
    "build_world",
    "initialize",
    "load_dataset",
    "run_round",
    "run_experiment",
]
