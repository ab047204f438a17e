"""Within-region depot allocation via Monte Carlo tree search.

The global state is decomposed per region; each region's planner scores full
assignments of its free agents to open depots by UCT search over sampled
incident chains, using greedy dispatch with no redistribution as the rollout
policy. Scores from independent trees (one per sampled chain) are averaged
and the best-scoring assignment is recommended.

Scores are negated discounted response times, so argmax = fastest response.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import dispatch as dispatch_mod
from . import sim as sim_mod
from .demand import Incident, IncidentChain, PoissonModel, SpikeSchedule, sample_chain
from .spatial import Region


class PlanningError(ValueError):
    pass


Action = tuple[tuple[int, int], ...]  # ((agent_id, depot_id), ...) sorted by agent


@dataclass
class RegionState:
    region_id: int
    state: sim_mod.SimState


def decompose(state: sim_mod.SimState, region: Region) -> RegionState:
    """Copy out exactly the agents, pending incidents, and depots of a region."""
    agents = [a.copy() for a in state.agents if a.region == region.id]
    pending = [i for i in state.pending if i.cell_id in region.cell_ids]
    depots = {d: state.depots[d] for d in region.depot_ids if d in state.depots}
    sub = sim_mod.SimState(clock=state.clock, pending=pending, agents=agents,
                           depots=depots)
    return RegionState(region_id=region.id, state=sub)


def reward(response_s: float, t_h_min: float, alpha: float) -> float:
    """Discounted response time of one dispatch; non-dispatch events score 0."""
    if not 0 < alpha <= 1:
        raise PlanningError(f"alpha must be in (0, 1], got {alpha}")
    return alpha ** t_h_min * response_s


def enumerate_actions(state: sim_mod.SimState) -> list[Action]:
    """All assignments of the free agents to distinct open depot slots.

    Canonical order puts the incumbent assignment (everyone keeps their
    depot) first, then the rest lexicographically, so score ties never
    command pointless shuffles.
    """
    free = sorted(a.id for a in state.agents if a.dispatchable())
    if not free:
        return [()]
    slots = {}
    for did, depot in sorted(state.depots.items()):
        held = sum(1 for a in state.agents
                   if a.depot == did and not a.dispatchable())
        slots[did] = depot.capacity - held
    if sum(max(s, 0) for s in slots.values()) < len(free):
        raise PlanningError(
            f"{len(free)} free agents but only "
            f"{sum(max(s, 0) for s in slots.values())} open depot slots")

    actions: list[Action] = []

    def assign(i: int, chosen: list[tuple[int, int]]):
        if i == len(free):
            actions.append(tuple(chosen))
            return
        for did in sorted(slots):
            if slots[did] < 1:
                continue
            slots[did] -= 1
            chosen.append((free[i], did))
            assign(i + 1, chosen)
            chosen.pop()
            slots[did] += 1

    assign(0, [])
    incumbent = tuple((a, state.agent(a).depot) for a in free)
    if incumbent in actions and actions[0] != incumbent:
        actions.remove(incumbent)
        actions.insert(0, incumbent)
    return actions


def apply_action(state: sim_mod.SimState, action: Action, cfg: sim_mod.SimConfig) -> None:
    if action:
        sim_mod.assign_depots(state, dict(action), cfg)


def _advance_to_incident(state: sim_mod.SimState, incident: Incident,
                         cfg: sim_mod.SimConfig) -> list[sim_mod.ResponseRecord]:
    """Play agent events up to the incident's arrival, then the arrival itself."""
    records = []
    while True:
        nxt = sim_mod.next_transition(state)
        if nxt is None or nxt[0] >= incident.time:
            break
        sim_mod.step_to(state, nxt[0], cfg)
        records.extend(dispatch_mod.drain_queue(state, cfg))
    sim_mod.step_to(state, incident.time, cfg)
    state.pending.append(incident)
    records.extend(dispatch_mod.drain_queue(state, cfg))
    return records


def _drain_tail(state: sim_mod.SimState, cfg: sim_mod.SimConfig) -> list[sim_mod.ResponseRecord]:
    """After the last arrival, keep playing events until the queue clears."""
    records = []
    while True:
        nxt = sim_mod.next_transition(state)
        if nxt is None:
            break
        sim_mod.step_to(state, nxt[0], cfg)
        records.extend(dispatch_mod.drain_queue(state, cfg))
    return records


def _discounted(records, t0: float, alpha: float) -> float:
    return sum(reward(r.response_s, r.dispatch_time - t0, alpha) for r in records)


def rollout(state: sim_mod.SimState, incidents: list[Incident], start: int,
            horizon_end: float, cfg: sim_mod.SimConfig, alpha: float,
            t0: float) -> float:
    """Greedy dispatch with no redistribution to the end of the chain.

    Returns the accumulated discounted response time (positive; callers
    negate for maximization). Mutates the given state; pass a copy.
    """
    total = 0.0
    for incident in incidents[start:]:
        if incident.time > horizon_end:
            break
        total += _discounted(_advance_to_incident(state, incident, cfg), t0, alpha)
    total += _discounted(_drain_tail(state, cfg), t0, alpha)
    return total


@dataclass
class TreeNode:
    state: sim_mod.SimState
    chain_pos: int                      # next incident index
    action: Action | None = None        # incoming edge's action
    edge_reward: float = 0.0            # discounted response incurred on entry
    parent: "TreeNode | None" = None
    children: list["TreeNode"] = field(default_factory=list)
    untried: list[Action] = field(default_factory=list)
    visits: int = 0
    value_sum: float = 0.0
    rollouts: int = 0

    def value(self) -> float:
        return self.value_sum / self.visits


def uct_score(node: TreeNode, c: float) -> float:
    if node.visits < 1 or node.parent is None or node.parent.visits < 1:
        return math.inf
    explore = c * math.sqrt(math.log(node.parent.visits) / node.visits)
    return node.value() + explore


def mcts(root: RegionState, chain: IncidentChain, iterations: int, c: float,
         seed: int, cfg: sim_mod.SimConfig, alpha: float) -> dict[Action, tuple[float, int]]:
    """UCT search over depot assignments; returns {action: (mean score, visits)}.

    The search is deterministic: expansion order, tie-breaks, and the greedy
    rollout are all canonical, and any stochastic service draws are keyed by
    the seed.
    """
    if iterations < 1:
        raise PlanningError(f"iterations must be >= 1, got {iterations}")
    if cfg.exponential_service:
        cfg = replace(cfg, seed=seed)
    incidents = list(chain)
    t0 = root.state.clock
    horizon_end = chain.horizon[1]
    root_node = TreeNode(state=root.state.copy(), chain_pos=0,
                         untried=enumerate_actions(root.state))
    if not root_node.untried:
        raise PlanningError(f"region {root.region_id} offers no allocation action")

    for _ in range(iterations):
        node = root_node
        prefix = 0.0
        # selection
        while not node.untried and node.children:
            node = max(node.children, key=lambda n: uct_score(n, c))
            prefix += node.edge_reward
        # expansion
        if node.untried:
            action = node.untried.pop(0)
            child_state = node.state.copy()
            apply_action(child_state, action, cfg)
            edge = 0.0
            pos = node.chain_pos
            if pos < len(incidents) and incidents[pos].time <= horizon_end:
                records = _advance_to_incident(child_state, incidents[pos], cfg)
                edge = _discounted(records, t0, alpha)
                pos += 1
            child = TreeNode(state=child_state, chain_pos=pos, action=action,
                             edge_reward=edge, parent=node)
            if pos < len(incidents):
                child.untried = enumerate_actions(child_state)
            node.children.append(child)
            node = child
            prefix += edge
        # rollout
        node.rollouts += 1
        tail = rollout(node.state.copy(), incidents, node.chain_pos,
                       horizon_end, cfg, alpha, t0)
        total = -(prefix + tail)
        # backpropagation
        while node is not None:
            node.visits += 1
            node.value_sum += total
            node = node.parent

    return {child.action: (child.value(), child.visits)
            for child in root_node.children}


def _seed_for(seed: int, region_id: int, chain_idx: int) -> int:
    return int(np.random.SeedSequence([seed, region_id, chain_idx]).generate_state(1)[0])


def _tree_task(args) -> dict[Action, tuple[float, int]]:
    root, chain, iterations, c, tree_seed, cfg, alpha = args
    return mcts(root, chain, iterations, c, tree_seed, cfg, alpha)


def plan_region(region: Region, root: RegionState, model: PoissonModel,
                cfg: sim_mod.SimConfig, n_chains: int, iterations: int, c: float,
                alpha: float, seed: int, planning_horizon_min: float,
                spikes: SpikeSchedule | None = None,
                workers: int = 1) -> tuple[Action, dict[Action, float]]:
    """Root-parallel planning for one region.

    Samples ``n_chains`` chains restricted to the region's cells, builds an
    independent tree per chain, averages per-action scores across trees, and
    returns (best action, mean scores). Results are independent of the worker
    count: trees are seeded per chain index and merged in chain order.
    """
    local_model = model.restricted(region.cell_ids)
    t0 = root.state.clock
    tasks = []
    for j in range(n_chains):
        chain = sample_chain(local_model, (t0, t0 + planning_horizon_min),
                             seed=_seed_for(seed, region.id, j), spikes=spikes)
        tasks.append((root, chain, iterations, c,
                      _seed_for(seed, region.id, n_chains + j), cfg, alpha))
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_tree_task, tasks))
    else:
        results = [_tree_task(t) for t in tasks]

    pooled: dict[Action, list[float]] = {}
    for scores in results:
        for action, (value, _) in scores.items():
            pooled.setdefault(action, []).append(value)
    means = {a: sum(v) / len(v) for a, v in pooled.items()}
    canonical = enumerate_actions(root.state)
    best = max(canonical, key=lambda a: (means.get(a, -math.inf), ))
    return best, means


def plan_regions(state: sim_mod.SimState, regions: list[Region],
                 model: PoissonModel, cfg: sim_mod.SimConfig, n_chains: int,
                 iterations: int, c: float, alpha: float, seed: int,
                 planning_horizon_min: float,
                 spikes: SpikeSchedule | None = None,
                 workers: int = 1) -> dict[int, Action]:
    """Recommend one depot assignment per region (regions planned in id order)."""
    recommendations: dict[int, Action] = {}
    for region in sorted(regions, key=lambda r: r.id):
        root = decompose(state, region)
        if not any(a.dispatchable() for a in root.state.agents):
            recommendations[region.id] = ()
            continue
        best, _ = plan_region(region, root, model, cfg, n_chains, iterations,
                              c, alpha, seed, planning_horizon_min, spikes, workers)
        recommendations[region.id] = best
    return recommendations
