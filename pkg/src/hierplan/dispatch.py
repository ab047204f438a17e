"""Greedy nearest-agent dispatch, shared by every planner variant.

Region assignments never filter candidates: any available waiting or
in-transit agent can be sent, using its interpolated position mid-route.
Ties go to the lowest agent id.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import sim
from .demand import Incident
from .travel import travel_time


@dataclass(frozen=True)
class DispatchDecision:
    incident: Incident
    agent_id: int | None  # None means the incident stays queued


def greedy_dispatch(state: sim.SimState, incident: Incident,
                    cfg: sim.SimConfig) -> DispatchDecision:
    """Pick the free agent with minimum travel time to the incident."""
    best = None
    for agent in state.agents:
        if not agent.dispatchable():
            continue
        here = sim.current_cell(agent, state.clock, cfg.travel)
        t = travel_time(cfg.travel, here, incident.cell_id)
        if best is None or (t, agent.id) < best:
            best = (t, agent.id)
    return DispatchDecision(incident=incident, agent_id=None if best is None else best[1])


def drain_queue(state: sim.SimState, cfg: sim.SimConfig) -> list[sim.ResponseRecord]:
    """Serve the FIFO queue while any free agent remains."""
    records = []
    while state.pending:
        decision = greedy_dispatch(state, state.pending[0], cfg)
        if decision.agent_id is None:
            break
        records.append(sim.dispatch(state, decision.agent_id, decision.incident, cfg))
    return records


def drain_policy(cfg: sim.SimConfig):
    """Dispatch policy for sim.run: drain the queue greedily at each event."""
    def policy(state: sim.SimState) -> list[sim.ResponseRecord]:
        return drain_queue(state, cfg)
    return policy
