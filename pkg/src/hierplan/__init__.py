"""Hierarchical allocation and dispatch planning for mobile responder fleets.

A grid world is segmented into regions around incident hotspots; a
cross-region allocator balances the fleet using queue-model or learned
waiting-time estimates, while per-region Monte Carlo tree search picks depot
assignments. A discrete-event simulator of stochastically arriving incidents
evaluates everything end to end.
"""

from . import demand, dispatch, harness, highlevel, lowlevel, sim, spatial, synth, travel, waittime

__all__ = ["demand", "dispatch", "harness", "highlevel", "lowlevel", "sim",
           "spatial", "synth", "travel", "waittime"]

__version__ = "0.1.0"
