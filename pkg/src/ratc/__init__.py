"""Reconfigurable atomic transaction commit: protocol models, a seeded
simulator and offline checkers."""

from .certification import ABORT, COMMIT, Payload, Serializability, ShardMap
from .scenarios import builtin, execute, loads as load_scenario
from .simulator import SimConfig, Simulator, count_delays, run

__version__ = "0.1.0"

__all__ = ["ABORT", "COMMIT", "Payload", "Serializability", "ShardMap", "SimConfig",
           "Simulator", "builtin", "count_delays", "execute", "load_scenario", "run"]
