"""Discrete-event simulator for a fleet of responders servicing incidents.

The clock is in minutes. Between events agents evolve deterministically:
waiting agents stay put, moving agents follow the travel model, servicing
agents hold until their completion time. The state only needs updating at
event instants (incident arrivals, agent arrivals/completions/restores,
planner triggers), which ``run`` iterates in deterministic order.

Simultaneous events are totally ordered as
incident < agent transition < failure < re-allocation tick, then entity id.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import spatial
from .demand import Incident, IncidentChain
from .travel import TravelModel, interpolate_position, travel_time


class SimError(ValueError):
    pass


class Status(str, Enum):
    WAITING = "waiting"
    IN_TRANSIT = "in_transit"
    RESPONDING = "responding"
    SERVICING = "servicing"


@dataclass(frozen=True)
class Depot:
    id: int
    cell_id: int
    capacity: int
    lat: float = 0.0
    lon: float = 0.0


@dataclass
class SimConfig:
    travel: TravelModel
    service_minutes: float = 20.0
    hospital_minutes: float = 0.0  # drop-off time folded into the busy window
    exponential_service: bool = False
    seed: int = 0

    def service_duration(self, incident: Incident) -> float:
        if self.exponential_service:
            # keyed by incident index so copies of a state draw identically
            rng = np.random.default_rng([self.seed, incident.idx])
            return rng.exponential(self.service_minutes) + self.hospital_minutes
        return self.service_minutes + self.hospital_minutes


@dataclass
class AgentState:
    id: int
    position: int  # cell id, valid when not mid-leg
    status: Status
    destination: int
    region: int
    depot: int
    available: bool = True
    busy_until: float = 0.0
    restore_at: float | None = None
    incident: Incident | None = None
    # current travel leg (status responding/in_transit)
    leg_from: int = 0
    leg_started: float = 0.0
    leg_total_s: float = 0.0
    arrives_at: float = 0.0

    def copy(self) -> "AgentState":
        return replace(self)

    def moving(self) -> bool:
        return self.status in (Status.RESPONDING, Status.IN_TRANSIT)

    def dispatchable(self) -> bool:
        return self.available and self.status in (Status.WAITING, Status.IN_TRANSIT)


@dataclass
class ResponseRecord:
    incident_time: float  # minutes
    cell_id: int
    dispatch_time: float
    arrival_time: float
    response_s: float
    agent_id: int
    incident_idx: int


@dataclass
class SimState:
    clock: float
    pending: list[Incident]
    agents: list[AgentState]
    depots: dict[int, Depot]

    def copy(self) -> "SimState":
        return SimState(clock=self.clock, pending=list(self.pending),
                        agents=[a.copy() for a in self.agents], depots=self.depots)

    def agent(self, agent_id: int) -> AgentState:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise SimError(f"no agent {agent_id}")

    def depot_load(self, depot_id: int) -> int:
        return sum(1 for a in self.agents if a.depot == depot_id)


def current_cell(agent: AgentState, clock: float, travel: TravelModel) -> int:
    """Cell the agent occupies at ``clock``, interpolating mid-leg."""
    if not agent.moving():
        return agent.position
    elapsed_s = (clock - agent.leg_started) * 60.0
    elapsed_s = min(max(elapsed_s, 0.0), agent.leg_total_s)
    return interpolate_position(travel, agent.leg_from, agent.destination, elapsed_s)


def _start_leg(agent: AgentState, from_cell: int, to_cell: int, t: float,
               status: Status, cfg: SimConfig) -> None:
    agent.leg_from = from_cell
    agent.leg_started = t
    agent.leg_total_s = travel_time(cfg.travel, from_cell, to_cell)
    agent.destination = to_cell
    agent.status = status
    agent.arrives_at = t + agent.leg_total_s / 60.0
    agent.position = from_cell


def step_to(state: SimState, t: float, cfg: SimConfig) -> SimState:
    """Advance every agent through its pending transitions up to time t."""
    if t < state.clock:
        raise SimError(f"cannot step backwards from {state.clock} to {t}")
    for agent in state.agents:
        _advance_agent(state, agent, t, cfg)
        if agent.restore_at is not None and agent.restore_at <= t:
            agent.available = True
            agent.restore_at = None
    state.clock = t
    return state


def _advance_agent(state: SimState, agent: AgentState, t: float, cfg: SimConfig) -> None:
    while True:
        if agent.moving() and agent.arrives_at <= t:
            arrived_at = agent.arrives_at
            agent.position = agent.destination
            if agent.status is Status.RESPONDING:
                agent.status = Status.SERVICING
                agent.busy_until = arrived_at + cfg.service_duration(agent.incident)
            else:
                agent.status = Status.WAITING
            continue
        if agent.status is Status.SERVICING and agent.busy_until <= t:
            freed_at = agent.busy_until
            agent.incident = None
            depot_cell = state.depots[agent.depot].cell_id
            if agent.position == depot_cell:
                agent.status = Status.WAITING
                agent.destination = depot_cell
            else:
                _start_leg(agent, agent.position, depot_cell, freed_at,
                           Status.IN_TRANSIT, cfg)
            continue
        return


def next_transition(state: SimState) -> tuple[float, int] | None:
    """Earliest pending agent transition strictly after the clock."""
    best = None
    for agent in state.agents:
        times = []
        if agent.moving():
            times.append(agent.arrives_at)
        if agent.status is Status.SERVICING:
            times.append(agent.busy_until)
        if agent.restore_at is not None:
            times.append(agent.restore_at)
        for tt in times:
            if tt > state.clock and (best is None or (tt, agent.id) < best):
                best = (tt, agent.id)
    return best


def dispatch(state: SimState, agent_id: int, incident: Incident,
             cfg: SimConfig) -> ResponseRecord:
    """Send an agent to a pending incident; returns the response record."""
    agent = state.agent(agent_id)
    if not agent.dispatchable():
        raise SimError(f"agent {agent_id} is not dispatchable "
                       f"(status={agent.status.value}, available={agent.available})")
    if incident not in state.pending:
        raise SimError(f"incident {incident} is not pending")
    from_cell = current_cell(agent, state.clock, cfg.travel)
    _start_leg(agent, from_cell, incident.cell_id, state.clock, Status.RESPONDING, cfg)
    agent.incident = incident
    state.pending.remove(incident)
    return ResponseRecord(
        incident_time=incident.time,
        cell_id=incident.cell_id,
        dispatch_time=state.clock,
        arrival_time=agent.arrives_at,
        response_s=(agent.arrives_at - incident.time) * 60.0,
        agent_id=agent_id,
        incident_idx=incident.idx,
    )


def assign_region(state: SimState, agent_id: int, region_id: int) -> SimState:
    state.agent(agent_id).region = region_id
    return state


def _rehome(state: SimState, agent: AgentState, depot: Depot, cfg: SimConfig) -> None:
    already_inbound = (agent.status is Status.IN_TRANSIT
                       and agent.depot == depot.id
                       and agent.destination == depot.cell_id)
    agent.depot = depot.id
    if agent.status in (Status.RESPONDING, Status.SERVICING) or already_inbound:
        return  # takes effect when the agent frees up / leg already under way
    here = current_cell(agent, state.clock, cfg.travel)
    if here == depot.cell_id:
        agent.status = Status.WAITING
        agent.position = here
        agent.destination = here
    else:
        _start_leg(agent, here, depot.cell_id, state.clock, Status.IN_TRANSIT, cfg)


def assign_depot(state: SimState, agent_id: int, depot_id: int, cfg: SimConfig) -> SimState:
    """Re-home an agent. Free agents start driving; busy agents re-home on
    completion of their current task."""
    agent = state.agent(agent_id)
    depot = state.depots.get(depot_id)
    if depot is None:
        raise SimError(f"no depot {depot_id}")
    load = sum(1 for a in state.agents if a.depot == depot_id and a.id != agent_id)
    if load + 1 > depot.capacity:
        raise SimError(f"depot {depot_id} over capacity ({load + 1} > {depot.capacity})")
    _rehome(state, agent, depot, cfg)
    return state


def assign_depots(state: SimState, assignment: dict[int, int], cfg: SimConfig) -> SimState:
    """Simultaneously re-home several agents (swaps allowed); the final
    configuration must respect every depot's capacity."""
    load: dict[int, int] = {}
    for a in state.agents:
        target = assignment.get(a.id, a.depot)
        load[target] = load.get(target, 0) + 1
    for depot_id, n in load.items():
        depot = state.depots.get(depot_id)
        if depot is None:
            raise SimError(f"no depot {depot_id}")
        if n > depot.capacity:
            raise SimError(f"depot {depot_id} over capacity ({n} > {depot.capacity})")
    for agent_id, depot_id in sorted(assignment.items()):
        _rehome(state, state.agent(agent_id), state.depots[depot_id], cfg)
    return state


def set_agent_available(state: SimState, agent_id: int, available: bool,
                        until: float | None = None) -> SimState:
    agent = state.agent(agent_id)
    agent.available = available
    agent.restore_at = None if available else until
    return state


@dataclass(frozen=True)
class FailureEvent:
    agent_id: int
    start_min: float
    end_min: float


def run(chain: IncidentChain, initial: SimState, cfg: SimConfig,
        dispatch_policy, allocation_policy=None,
        max_realloc_gap_min: float | None = None,
        failures: tuple[FailureEvent, ...] = ()) -> tuple[list[ResponseRecord], SimState]:
    """Event loop over one incident chain.

    ``dispatch_policy(state)`` performs any dispatches currently possible and
    returns their response records (FIFO drain). ``allocation_policy(state)``,
    when given, is invoked after every incident, after failures, and whenever
    ``max_realloc_gap_min`` elapses without a planning call. Returns all
    response records plus the settled final state.
    """
    state = initial.copy()
    records: list[ResponseRecord] = []
    incidents = list(chain)
    fail_events = sorted(failures, key=lambda f: (f.start_min, f.agent_id))
    i = 0
    next_fail = 0
    last_plan = state.clock

    def plan(t):
        nonlocal last_plan
        if allocation_policy is not None:
            allocation_policy(state)
            last_plan = t

    while True:
        candidates = []
        if i < len(incidents):
            candidates.append((incidents[i].time, 0, incidents[i].idx, "incident"))
        nxt = next_transition(state)
        if nxt is not None:
            candidates.append((nxt[0], 1, nxt[1], "agent"))
        if next_fail < len(fail_events):
            f = fail_events[next_fail]
            candidates.append((f.start_min, 2, f.agent_id, "failure"))
        live = i < len(incidents) or state.pending
        if allocation_policy is not None and max_realloc_gap_min is not None and live:
            candidates.append((last_plan + max_realloc_gap_min, 3, 0, "tick"))
        if not candidates:
            break

        t, _, _, kind = min(candidates)
        step_to(state, t, cfg)

        if kind == "incident":
            state.pending.append(incidents[i])
            i += 1
            records.extend(dispatch_policy(state))
            plan(t)
        elif kind == "agent":
            records.extend(dispatch_policy(state))
        elif kind == "failure":
            f = fail_events[next_fail]
            next_fail += 1
            set_agent_available(state, f.agent_id, False, until=f.end_min)
            plan(t)
        else:  # tick
            plan(t)
    return records, state


# ---------------------------------------------------------------------------
# construction and file formats

def initial_state(assignments: list[tuple[int, int]], depots: list[Depot],
                  t0: float = 0.0) -> SimState:
    """Agents 0..n-1 waiting at their (region, depot) assignments."""
    depot_map = {d.id: d for d in depots}
    agents = []
    for agent_id, (region_id, depot_id) in enumerate(assignments):
        cell = depot_map[depot_id].cell_id
        agents.append(AgentState(id=agent_id, position=cell, status=Status.WAITING,
                                 destination=cell, region=region_id, depot=depot_id))
    state = SimState(clock=t0, pending=[], agents=agents, depots=depot_map)
    for depot in depots:
        if state.depot_load(depot.id) > depot.capacity:
            raise SimError(f"depot {depot.id} over capacity in initial state")
    return state


def load_depots_csv(path, grid: spatial.Grid) -> list[Depot]:
    depots = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                lat, lon = float(row["lat"]), float(row["lon"])
                depot = Depot(id=int(row["depot_id"]), capacity=int(row["capacity"]),
                              cell_id=spatial.locate(grid, (lat, lon)), lat=lat, lon=lon)
            except (KeyError, ValueError) as exc:
                raise SimError(f"{path}:{lineno}: bad depot row: {exc}") from exc
            if depot.capacity < 1:
                raise SimError(f"{path}:{lineno}: depot capacity must be >= 1")
            depots.append(depot)
    if not depots:
        raise SimError(f"{path}: no depot rows")
    return depots


def save_run_log(path, records: list[ResponseRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["incident_time", "cell", "dispatch_time", "arrival_time",
                         "response_s", "agent_id"])
        for r in records:
            writer.writerow([repr(r.incident_time), r.cell_id, repr(r.dispatch_time),
                             repr(r.arrival_time), repr(r.response_s), r.agent_id])
