"""Cross-region agent allocation.

Distributes the available fleet across regions in two phases: first sustain
each region's arrival rate in decreasing-rate order, then hand out surplus
agents by marginal waiting-time benefit. A companion routine turns an
allocation into concrete cross-region moves for the simulator.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

from . import sim as sim_mod
from .spatial import Region
from .travel import travel_time

log = logging.getLogger(__name__)


class AllocationError(ValueError):
    pass


@dataclass
class Allocation:
    p: dict[int, int]  # region id -> agent count

    def total(self) -> int:
        return sum(self.p.values())


def action_space_size(n_depots: int, n_agents: int) -> int:
    """Exact count of ordered depot assignments for a fleet."""
    if n_agents > n_depots:
        raise AllocationError(f"{n_agents} agents cannot occupy {n_depots} depots")
    return math.perm(n_depots, n_agents)


def allocate(gammas: dict[int, float], capacities: dict[int, int],
             eta: float, estimator, n_agents: int) -> Allocation:
    """Distribute ``n_agents`` across regions.

    ``gammas`` holds each region's arrival rate per minute, ``capacities``
    the number of agents its depots can host, ``eta`` the per-agent service
    rate per minute. ``estimator.wait_s(region_id, p, gamma)`` scores the
    marginal benefit of surplus agents.
    """
    if n_agents < 1:
        raise AllocationError(f"need at least one agent, got {n_agents}")
    usable = [r for r in gammas if capacities.get(r, 0) > 0]
    if sum(capacities[r] for r in usable) < n_agents:
        raise AllocationError(
            f"total depot capacity {sum(capacities[r] for r in usable)} "
            f"cannot host {n_agents} agents")
    skipped = sorted(set(gammas) - set(usable))
    if skipped:
        log.warning("regions %s have no depot capacity and receive no agents", skipped)

    counts = {r: 0 for r in gammas}
    order = sorted(usable, key=lambda r: (-gammas[r], r))
    assigned = 0

    # phase 1: sustain arrival rates in decreasing-rate order
    i = 0
    while assigned < n_agents and i < len(order):
        r = order[i]
        if counts[r] >= capacities[r]:
            i += 1
            continue
        counts[r] += 1
        assigned += 1
        if eta * counts[r] >= gammas[r]:
            i += 1
    if i < len(order):
        log.warning("fleet exhausted before sustaining every region "
                    "(stopped at region %d)", order[i])

    # phase 2: surplus by marginal waiting-time benefit
    while assigned < n_agents:
        best = None
        for r in order:
            if counts[r] >= capacities[r]:
                continue
            if counts[r] == 0:
                j = math.inf
            else:
                now = estimator.wait_s(r, counts[r], gammas[r])
                nxt = estimator.wait_s(r, counts[r] + 1, gammas[r])
                j = math.inf if math.isinf(now) else now - nxt
            if best is None or (-j, r) < best:
                best = (-j, r)
        if best is None:
            raise AllocationError("no region can accept further agents")
        counts[best[1]] += 1
        assigned += 1

    return Allocation(p=counts)


def rebalance(state: sim_mod.SimState, allocation: Allocation,
              regions: list[Region], cfg: sim_mod.SimConfig,
              ) -> list[tuple[int, int, int]]:
    """Minimal multiset of (agent_id, region_id, depot_id) moves that brings
    per-region counts of available agents to the allocation.

    Receiving regions are filled one slot at a time with the donor agent
    closest to the region's nearest open depot; free agents are preferred
    over busy ones (busy agents only re-home once they finish). The caller
    executes the moves via assign_region/assign_depot.
    """
    region_map = {r.id: r for r in regions}
    current: dict[int, int] = {rid: 0 for rid in allocation.p}
    for agent in state.agents:
        if agent.available and agent.region in current:
            current[agent.region] += 1
    diff = {rid: current.get(rid, 0) - allocation.p[rid] for rid in allocation.p}

    depot_vacancy = {}
    for rid, region in region_map.items():
        for did in region.depot_ids:
            depot = state.depots[did]
            depot_vacancy[did] = depot.capacity - state.depot_load(did)

    moves: list[tuple[int, int, int]] = []
    moved: set[int] = set()
    for rid in sorted(allocation.p):
        while diff[rid] < 0:
            best = None
            for agent in state.agents:
                if (agent.id in moved or not agent.available
                        or agent.region == rid or diff.get(agent.region, 0) <= 0):
                    continue
                here = sim_mod.current_cell(agent, state.clock, cfg.travel)
                for did in sorted(region_map[rid].depot_ids):
                    if depot_vacancy[did] < 1:
                        continue
                    t = travel_time(cfg.travel, here, state.depots[did].cell_id)
                    busy = 0 if agent.dispatchable() else 1
                    key = (busy, t, agent.id, did)
                    if best is None or key < best:
                        best = key
            if best is None:
                log.warning("region %d short of its allocation but no agent can move",
                            rid)
                break
            _, _, agent_id, depot_id = best
            agent = state.agent(agent_id)
            depot_vacancy[depot_id] -= 1
            depot_vacancy[agent.depot] = depot_vacancy.get(agent.depot, 0) + 1
            diff[agent.region] -= 1
            diff[rid] += 1
            moved.add(agent_id)
            moves.append((agent_id, rid, depot_id))
    return moves
