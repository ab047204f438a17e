"""Experiment orchestration: world building, policies, scenarios, metrics.

Everything here is a pure function of the config plus its seeds. Runs fan
out over a process pool and are merged in (seed, chain) order, so outputs
are byte-identical for any worker count. Wall-clock planning durations are
logged, never written into result files.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import demand, dispatch, highlevel, lowlevel, sim, spatial, travel, waittime

log = logging.getLogger(__name__)

POLICIES = ("baseline", "ll_only", "hl_ll_queue", "hl_ll_forest")
SCENARIOS = ("stationary", "spikes", "failures")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # world inputs
    lat_min: float = 36.0
    lon_min: float = -86.8
    lat_max: float = 36.1446
    lon_max: float = -86.6215
    cell_size_miles: float = 1.0
    incidents_csv: str = ""
    depots_csv: str = ""
    travel_lookup_csv: str | None = None
    # segmentation and demand
    k: int = 5
    ks: list[int] | None = None
    seed: int = 0
    # fleet and physics
    n_agents: int = 26
    service_minutes: float = 20.0
    hospital_minutes: float = 0.0
    exponential_service: bool = False
    speed_mph: float = 30.0
    # planners
    mcts_iterations: int = 1000
    n_chains: int = 50
    alpha: float = 0.99995
    uct_c: float = 1.44
    max_realloc_gap_min: float = 60.0
    planning_horizon_min: float = 240.0
    # evaluation
    horizon_min: float = 1440.0
    n_eval_chains: int = 5
    eval_seeds: list[int] = field(default_factory=lambda: [0])
    scenario: str = "stationary"
    spikes_json: str | None = None
    policy: str = "baseline"
    policies: list[str] = field(default_factory=lambda: ["baseline", "ll_only", "hl_ll_queue"])
    n_failures: int = 3
    failure_duration_h: float = 8.0
    failure_start_min: float | None = None
    # surrogate training
    forest_trees: int = 150
    forest_max_depth: int | None = None
    forest_min_split: int = 2
    forest_min_leaf: int = 1
    forest_bootstrap: bool = True
    surrogate_multipliers: list[float] = field(default_factory=lambda: [0.5, 1.0, 1.5, 2.0, 3.0])
    surrogate_chains_per_mult: int = 3
    surrogate_horizon_min: float = 720.0
    # execution
    workers: int = 1

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; choose from {POLICIES}")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        for p in self.policies:
            if p not in POLICIES:
                raise ConfigError(f"unknown policy {p!r} in policies")

    @property
    def mu(self) -> float:
        return 1.0 / self.service_minutes

    def forest_hyperparams(self) -> waittime.ForestHyperparams:
        return waittime.ForestHyperparams(
            n_trees=self.forest_trees, max_depth=self.forest_max_depth,
            min_split=self.forest_min_split, min_leaf=self.forest_min_leaf,
            bootstrap=self.forest_bootstrap)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    known = {f for f in ExperimentConfig.__dataclass_fields__}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    try:
        return ExperimentConfig(**payload)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def save_config(path, config: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        json.dump(asdict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# world assembly

@dataclass
class World:
    grid: spatial.Grid
    depots: list[sim.Depot]
    model: demand.PoissonModel
    regions: list[spatial.Region]
    travel: travel.TravelModel
    spikes: demand.SpikeSchedule | None = None

    def sim_config(self, config: ExperimentConfig) -> sim.SimConfig:
        return sim.SimConfig(travel=self.travel,
                             service_minutes=config.service_minutes,
                             hospital_minutes=config.hospital_minutes,
                             exponential_service=config.exponential_service,
                             seed=config.seed)

    def region_capacities(self) -> dict[int, int]:
        depot_map = {d.id: d for d in self.depots}
        return {r.id: sum(depot_map[d].capacity for d in r.depot_ids)
                for r in self.regions}


def build_world(config: ExperimentConfig, k: int | None = None) -> World:
    """Assemble grid, demand model, regions, and travel model from the config files."""
    grid = spatial.build_grid((config.lat_min, config.lon_min,
                               config.lat_max, config.lon_max),
                              config.cell_size_miles)
    if not config.incidents_csv or not config.depots_csv:
        raise ConfigError("config needs incidents_csv and depots_csv paths")
    records, span = demand.load_incidents_csv(config.incidents_csv, grid)
    depots = sim.load_depots_csv(config.depots_csv, grid)
    model = demand.fit_poisson(records, grid, observed_minutes=span)
    regions = spatial.segment_regions(grid, records, depots,
                                      k=k or config.k, seed=config.seed)
    if config.travel_lookup_csv:
        travel_model = travel.load_lookup_csv(config.travel_lookup_csv, grid)
    else:
        travel_model = travel.EuclideanTravel(grid=grid, speed_mph=config.speed_mph)
    spikes = demand.load_spikes(config.spikes_json) if config.spikes_json else None
    return World(grid=grid, depots=depots, model=model, regions=regions,
                 travel=travel_model, spikes=spikes)


def effective_region_rates(world: World, t: float,
                           spikes: demand.SpikeSchedule | None) -> dict[int, float]:
    rates = {}
    for region in world.regions:
        total = 0.0
        for cid in region.cell_ids:
            base = world.model.rate_per_cell.get(cid, 0.0)
            mult = spikes.multiplier_at(cid, t) if spikes else 1.0
            total += base * mult
        rates[region.id] = total
    return rates


def initial_deployment(world: World, config: ExperimentConfig) -> list[tuple[int, int]]:
    """(region, depot) assignment per agent: queue-model allocation across
    regions, then greedy p-median placement within each, identical for every
    policy so comparisons start from the same state."""
    estimator = waittime.QueueWaitEstimator(mu_per_min=config.mu)
    gammas = effective_region_rates(world, 0.0, None)
    capacities = world.region_capacities()
    allocation = highlevel.allocate(gammas, capacities, eta=config.mu,
                                    estimator=estimator, n_agents=config.n_agents)
    cfg = world.sim_config(config)
    depot_map = {d.id: d for d in world.depots}
    assignments: list[tuple[int, int]] = []
    for region in sorted(world.regions, key=lambda r: r.id):
        p = allocation.p.get(region.id, 0)
        if p == 0:
            continue
        weights = {c: world.model.rate_per_cell.get(c, 0.0)
                   for c in sorted(region.cell_ids)}
        dist = {(c, d): travel.travel_time(cfg.travel, c, depot_map[d].cell_id)
                for c in weights for d in region.depot_ids}
        inst = waittime.PMedianInstance(cell_weights=weights,
                                        depot_ids=sorted(region.depot_ids),
                                        dist=dist, p=p)
        placement, _ = waittime.greedy_add(inst)
        assignments.extend((region.id, depot_id) for depot_id in placement)
    return assignments


# ---------------------------------------------------------------------------
# allocation policies

@dataclass
class PlannerEvent:
    t: float
    kind: str
    moves: list[tuple[int, int, int]]
    shortfall: bool
    duration_s: float


class ReallocationPolicy:
    """Low-level planning each trigger; optionally re-balances regions first."""

    def __init__(self, world: World, config: ExperimentConfig,
                 cfg: sim.SimConfig, estimator=None,
                 spikes: demand.SpikeSchedule | None = None):
        self.world = world
        self.config = config
        self.cfg = cfg
        self.estimator = estimator  # None => low-level only
        self.spikes = spikes
        self.calls = 0
        self.events: list[PlannerEvent] = []

    def __call__(self, state: sim.SimState) -> None:
        start = time.perf_counter()
        self.calls += 1
        call_seed = int(np.random.SeedSequence(
            [self.config.seed, 7001, self.calls]).generate_state(1)[0])
        moves: list[tuple[int, int, int]] = []
        shortfall = False
        if self.estimator is not None:
            available = sum(1 for a in state.agents if a.available)
            if available >= 1:
                gammas = effective_region_rates(self.world, state.clock, self.spikes)
                capacities = self.world.region_capacities()
                allocation = highlevel.allocate(gammas, capacities,
                                                eta=self.config.mu,
                                                estimator=self.estimator,
                                                n_agents=available)
                current: dict[int, int] = {rid: 0 for rid in allocation.p}
                for agent in state.agents:
                    if agent.available and agent.region in current:
                        current[agent.region] += 1
                shortfall = any(current[rid] < allocation.p[rid] for rid in allocation.p)
                moves = highlevel.rebalance(state, allocation, self.world.regions,
                                            self.cfg)
                for agent_id, region_id, depot_id in moves:
                    sim.assign_region(state, agent_id, region_id)
                    sim.assign_depot(state, agent_id, depot_id, self.cfg)
        recommendations = lowlevel.plan_regions(
            state, self.world.regions, self.world.model, self.cfg,
            n_chains=self.config.n_chains, iterations=self.config.mcts_iterations,
            c=self.config.uct_c, alpha=self.config.alpha, seed=call_seed,
            planning_horizon_min=self.config.planning_horizon_min,
            spikes=self.spikes, workers=1)
        for region_id in sorted(recommendations):
            lowlevel.apply_action(state, recommendations[region_id], self.cfg)
        duration = time.perf_counter() - start
        kind = "hl_ll" if self.estimator is not None else "ll"
        self.events.append(PlannerEvent(t=state.clock, kind=kind, moves=moves,
                                        shortfall=shortfall, duration_s=duration))
        log.info("planning call %d at t=%.1f min took %.3f s (%d moves)",
                 self.calls, state.clock, duration, len(moves))


def make_policy(name: str, world: World, config: ExperimentConfig,
                cfg: sim.SimConfig, forests: dict[int, waittime.ForestModel] | None,
                spikes: demand.SpikeSchedule | None):
    if name == "baseline":
        return None
    if name == "ll_only":
        return ReallocationPolicy(world, config, cfg, estimator=None, spikes=spikes)
    if name == "hl_ll_queue":
        return ReallocationPolicy(world, config, cfg,
                                  estimator=waittime.QueueWaitEstimator(config.mu),
                                  spikes=spikes)
    if name == "hl_ll_forest":
        if not forests:
            raise ConfigError("hl_ll_forest needs trained surrogate models")
        return ReallocationPolicy(world, config, cfg,
                                  estimator=waittime.ForestWaitEstimator(forests),
                                  spikes=spikes)
    raise ConfigError(f"unknown policy {name!r}")


# ---------------------------------------------------------------------------
# surrogate training

def train_surrogates(world: World, config: ExperimentConfig, holdout: bool = False,
                     ) -> tuple[dict[int, waittime.ForestModel], list[waittime.SurrogateSample]]:
    """Per-region forests trained on simulated (agents, rate) -> response data.

    With ``holdout`` the chains use a shifted seed stream, yielding unseen
    evaluation samples from the same generating process.
    """
    cfg = world.sim_config(config)
    depot_map = {d.id: d for d in world.depots}
    tag = 9001 if holdout else 3001
    forests: dict[int, waittime.ForestModel] = {}
    all_samples: list[waittime.SurrogateSample] = []
    for region in sorted(world.regions, key=lambda r: r.id):
        if not region.depot_ids:
            continue
        chains = []
        for mi, mult in enumerate(config.surrogate_multipliers):
            scaled = world.model.scaled(mult)
            gamma = demand.region_rate(scaled, region)
            for j in range(config.surrogate_chains_per_mult):
                chain_seed = int(np.random.SeedSequence(
                    [config.seed, tag, region.id, mi, j]).generate_state(1)[0])
                chain = demand.sample_chain(scaled.restricted(region.cell_ids),
                                            (0.0, config.surrogate_horizon_min),
                                            seed=chain_seed)
                chains.append((chain, gamma))
        capacity = sum(depot_map[d].capacity for d in region.depot_ids)
        p_values = range(1, min(len(region.depot_ids), capacity) + 1)
        samples = waittime.generate_training_data(
            region, world.model.rate_per_cell, chains, p_values,
            world.depots, cfg)
        all_samples.extend(samples)
        if not holdout and len(samples) >= 2:
            forests[region.id] = waittime.train_forest(
                samples, config.forest_hyperparams(),
                seed=int(np.random.SeedSequence([config.seed, 5001, region.id])
                         .generate_state(1)[0]))
    return forests, all_samples


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricsReport:
    count: int
    mean_s: float
    q1_s: float
    q3_s: float
    p9_s: float
    p91_s: float
    histogram_bin_s: float
    histogram: list[int]
    per_run: list[dict]

    def to_dict(self) -> dict:
        return asdict(self)


def nearest_rank(sorted_values, q: float) -> float:
    """Nearest-rank percentile: the ceil(q/100 * n)-th smallest value."""
    n = len(sorted_values)
    idx = max(1, math.ceil(q / 100.0 * n))
    return sorted_values[idx - 1]


def summarize(per_run_records: list[tuple[dict, list[sim.ResponseRecord]]],
              bin_s: float = 60.0) -> MetricsReport:
    values = sorted(r.response_s for _, recs in per_run_records for r in recs)
    if not values:
        return MetricsReport(count=0, mean_s=0.0, q1_s=0.0, q3_s=0.0, p9_s=0.0,
                             p91_s=0.0, histogram_bin_s=bin_s, histogram=[],
                             per_run=[dict(meta, count=0, mean_s=0.0)
                                      for meta, _ in per_run_records])
    n_bins = int(values[-1] // bin_s) + 1
    hist = [0] * n_bins
    for v in values:
        hist[int(v // bin_s)] += 1
    per_run = []
    for meta, recs in per_run_records:
        mean = sum(r.response_s for r in recs) / len(recs) if recs else 0.0
        per_run.append(dict(meta, count=len(recs), mean_s=mean))
    return MetricsReport(
        count=len(values),
        mean_s=sum(values) / len(values),
        q1_s=nearest_rank(values, 25), q3_s=nearest_rank(values, 75),
        p9_s=nearest_rank(values, 9), p91_s=nearest_rank(values, 91),
        histogram_bin_s=bin_s, histogram=hist, per_run=per_run)


# ---------------------------------------------------------------------------
# running experiments

def _failure_events(config: ExperimentConfig, n_failures: int,
                    run_seed: int) -> tuple[sim.FailureEvent, ...]:
    if n_failures == 0:
        return ()
    start = (config.failure_start_min if config.failure_start_min is not None
             else config.horizon_min / 4.0)
    rng = np.random.default_rng([config.seed, 8001, run_seed])
    agents = sorted(rng.choice(config.n_agents, size=n_failures, replace=False).tolist())
    duration = config.failure_duration_h * 60.0
    return tuple(sim.FailureEvent(agent_id=a, start_min=start,
                                  end_min=start + duration) for a in agents)


def _eval_chain(world: World, config: ExperimentConfig, eval_seed: int,
                chain_idx: int, spikes) -> demand.IncidentChain:
    chain_seed = int(np.random.SeedSequence(
        [config.seed, 1001, eval_seed, chain_idx]).generate_state(1)[0])
    return demand.sample_chain(world.model, (0.0, config.horizon_min),
                               seed=chain_seed, spikes=spikes)


def run_single(world: World, config: ExperimentConfig, policy_name: str,
               eval_seed: int, chain_idx: int,
               forests: dict[int, waittime.ForestModel] | None = None,
               n_failures: int = 0,
               ) -> tuple[list[sim.ResponseRecord], list[PlannerEvent]]:
    """One policy on one sampled chain; the unit of parallel fan-out."""
    spikes = world.spikes if config.scenario == "spikes" else None
    chain = _eval_chain(world, config, eval_seed, chain_idx, spikes)
    assignments = initial_deployment(world, config)
    state = sim.initial_state(assignments, world.depots, t0=0.0)
    cfg = world.sim_config(config)
    run_cfg = replace(cfg, seed=int(np.random.SeedSequence(
        [config.seed, 2001, eval_seed, chain_idx]).generate_state(1)[0]))
    policy = make_policy(policy_name, world, config, run_cfg, forests, spikes)
    failures = _failure_events(config, n_failures, eval_seed)
    records, _ = sim.run(chain, state, run_cfg, dispatch.drain_policy(run_cfg),
                         allocation_policy=policy,
                         max_realloc_gap_min=config.max_realloc_gap_min,
                         failures=failures)
    events = policy.events if policy is not None else []
    return records, events


def _run_task(args):
    world, config, policy_name, eval_seed, chain_idx, forests, n_failures = args
    records, events = run_single(world, config, policy_name, eval_seed,
                                 chain_idx, forests, n_failures)
    return records, events


def run_matrix(world: World, config: ExperimentConfig, policy_name: str,
               forests=None, n_failures: int = 0, workers: int | None = None,
               ) -> tuple[MetricsReport, list[list[sim.ResponseRecord]], list[PlannerEvent]]:
    """All (eval seed, chain) runs for one policy, pooled."""
    tasks = [(world, config, policy_name, s, ci, forests, n_failures)
             for s in config.eval_seeds for ci in range(config.n_eval_chains)]
    workers = workers if workers is not None else config.workers
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]
    per_run = []
    all_events: list[PlannerEvent] = []
    run_logs = []
    for ((_, _, _, s, ci, _, _), (records, events)) in zip(tasks, results):
        per_run.append(({"seed": s, "chain": ci}, records))
        run_logs.append(records)
        all_events.extend(events)
    return summarize(per_run), run_logs, all_events


def run_experiment(config: ExperimentConfig, out_dir=None,
                   ) -> dict[str, MetricsReport]:
    """The config's policy (or each of config.policies when policy == 'matrix'
    is not supported; single policy here) on the configured scenario."""
    world = build_world(config)
    forests = None
    if config.policy == "hl_ll_forest":
        forests, _ = train_surrogates(world, config)
    n_failures = config.n_failures if config.scenario == "failures" else 0
    report, run_logs, events = run_matrix(world, config, config.policy,
                                          forests=forests, n_failures=n_failures)
    if out_dir is not None:
        _write_run_outputs(out_dir, config, {config.policy: (report, run_logs, events)})
    return {config.policy: report}


def compare_estimators(config: ExperimentConfig, out_dir=None) -> dict[int, dict[str, float]]:
    """Held-out MSE of the forest vs the queue-model wait per region count."""
    results: dict[int, dict[str, float]] = {}
    for k in (config.ks or [5, 6, 7]):
        world = build_world(config, k=k)
        forests, _ = train_surrogates(world, config, holdout=False)
        _, holdout_samples = train_surrogates(world, config, holdout=True)
        queue_est = waittime.QueueWaitEstimator(config.mu)
        sq_forest, sq_queue, n = 0.0, 0.0, 0
        for s in holdout_samples:
            if s.region_id not in forests:
                continue
            pred_f = waittime.predict_wait(forests[s.region_id], s.p, s.gamma)
            pred_q = queue_est.wait_s(s.region_id, s.p, s.gamma)
            if not math.isfinite(pred_q):
                # unstable loads: the queue model pins the worst observed wait
                pred_q = max(x.mean_response_s for x in holdout_samples)
            sq_forest += (pred_f - s.mean_response_s) ** 2
            sq_queue += (pred_q - s.mean_response_s) ** 2
            n += 1
        results[k] = {"forest_mse": sq_forest / n if n else math.nan,
                      "queue_mse": sq_queue / n if n else math.nan,
                      "n_samples": n}
    if out_dir is not None:
        _dump_json(out_dir, "estimator_mse.json", results)
    return results


def inject_failures(config: ExperimentConfig, n_failures: int | None = None,
                    duration_h: float | None = None, out_dir=None,
                    ) -> dict[str, dict[int, MetricsReport]]:
    """Per-policy pooled metrics for 0..n simultaneous agent failures."""
    n_max = n_failures if n_failures is not None else config.n_failures
    if n_max >= config.n_agents:
        raise ConfigError(f"cannot fail {n_max} of {config.n_agents} agents")
    if duration_h is not None:
        config = replace(config, failure_duration_h=duration_h)
    world = build_world(config)
    forests = None
    if "hl_ll_forest" in config.policies:
        forests, _ = train_surrogates(world, config)
    out: dict[str, dict[int, MetricsReport]] = {}
    events_out: dict[str, dict[int, list[PlannerEvent]]] = {}
    for policy_name in config.policies:
        out[policy_name] = {}
        events_out[policy_name] = {}
        for n in range(n_max + 1):
            report, _, events = run_matrix(world, config, policy_name,
                                           forests=forests, n_failures=n)
            out[policy_name][n] = report
            events_out[policy_name][n] = events
    if out_dir is not None:
        payload = {p: {str(n): r.to_dict() for n, r in by_n.items()}
                   for p, by_n in out.items()}
        _dump_json(out_dir, "failure_metrics.json", payload)
    return out


# ---------------------------------------------------------------------------
# output files

def _dump_json(out_dir, name, payload) -> None:
    import os
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_run_outputs(out_dir, config: ExperimentConfig, by_policy) -> None:
    import os
    os.makedirs(out_dir, exist_ok=True)
    for policy_name, (report, run_logs, events) in by_policy.items():
        _dump_json(out_dir, f"metrics_{policy_name}.json", report.to_dict())
        for i, records in enumerate(run_logs):
            seed = config.eval_seeds[i // config.n_eval_chains]
            chain = i % config.n_eval_chains
            sim.save_run_log(os.path.join(
                out_dir, f"runlog_{policy_name}_s{seed}_c{chain}.csv"), records)
        trace = [{"t": e.t, "kind": e.kind, "moves": [list(m) for m in e.moves],
                  "shortfall": e.shortfall} for e in events]
        _dump_json(out_dir, f"planner_events_{policy_name}.json", trace)
