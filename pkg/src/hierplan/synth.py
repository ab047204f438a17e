"""Synthetic benchmark city: a 10x10 mile grid, 12 depots, 8 agents.

Demand concentrates in four well-separated corner districts over a faint
uniform floor, scaled so the fleet runs at roughly 50% utilization counting
travel toward busy time. The separation means cross-district dispatches are
expensive, which is exactly the regime where balancing agents across regions
pays off. Small enough that the full experiment matrix runs in minutes.
Historical incidents for model fitting and segmentation are sampled from the
true rates over a 30-day window.
"""

from __future__ import annotations

import csv
import math
import os
from datetime import datetime, timedelta, timezone

import numpy as np

from . import demand, harness, sim, spatial, travel

ORIGIN = (36.0, -86.8)
SIZE_MILES = 10.0
CELL_MILES = 1.0
N_AGENTS = 8
# ~0.5 utilization counting travel toward busy time:
# 0.14/min * (20 min service + ~5 min travel) / 8 agents
TOTAL_RATE_PER_MIN = 0.14
HISTORY_MINUTES = 30 * 24 * 60.0
HISTORY_SEED = 424242

DISTRICTS = [((1, 1), 4.0), ((1, 8), 4.0), ((8, 1), 4.0), ((8, 8), 4.0)]
DEPOT_CELLS = [(0, 0), (1, 1), (2, 2),      # north-west district
               (0, 9), (1, 8), (2, 7),      # north-east
               (9, 0), (8, 1), (7, 2),      # south-west
               (7, 7), (8, 8), (9, 9)]      # south-east
# spike concentrates on the south-east district's outer corner, shifting both
# its load (demands an extra agent) and its internal demand centroid
SPIKE_BLOCK = [(8, 8), (8, 9), (9, 8), (9, 9)]


def bounding_box() -> tuple[float, float, float, float]:
    lat0, lon0 = ORIGIN
    lat1 = lat0 + SIZE_MILES / spatial.MILES_PER_DEG_LAT
    lon1 = lon0 + SIZE_MILES / (spatial.MILES_PER_DEG_LAT * math.cos(math.radians(lat0)))
    return (lat0, lon0, lat1, lon1)


def make_grid() -> spatial.Grid:
    return spatial.build_grid(bounding_box(), CELL_MILES)


def make_model(grid: spatial.Grid) -> demand.PoissonModel:
    raw = {}
    for cell in grid.cells:
        w = 0.01
        for (hr, hc), weight in DISTRICTS:
            d2 = (cell.row - hr) ** 2 + (cell.col - hc) ** 2
            w += weight * math.exp(-d2 / (2 * 1.0 ** 2))
        raw[cell.id] = w
    total = sum(raw.values())
    rates = {cid: w / total * TOTAL_RATE_PER_MIN for cid, w in raw.items()}
    return demand.PoissonModel(rate_per_cell=rates, fitted_over_minutes=HISTORY_MINUTES)


def make_depots(grid: spatial.Grid) -> list[sim.Depot]:
    depots = []
    for i, (row, col) in enumerate(DEPOT_CELLS):
        cell = grid.cells[row * grid.n_cols + col]
        depots.append(sim.Depot(id=i, cell_id=cell.id, capacity=1,
                                lat=cell.centroid[0], lon=cell.centroid[1]))
    return depots


def make_history(grid: spatial.Grid, model: demand.PoissonModel,
                 seed: int = HISTORY_SEED) -> list[demand.IncidentRecord]:
    """Historical incidents jittered uniformly within their cells."""
    chain = demand.sample_chain(model, (0.0, HISTORY_MINUTES), seed=seed)
    rng = np.random.default_rng([seed, 777])
    s = grid.cell_size_miles
    records = []
    for inc in chain:
        cell = grid.cells[inc.cell_id]
        x = (cell.col + rng.random()) * s
        y = (cell.row + rng.random()) * s
        lat, lon = grid.unproject(x, y)
        records.append(demand.IncidentRecord(time_min=inc.time, lat=lat, lon=lon,
                                             cell_id=spatial.locate(grid, (lat, lon))))
    return records


def make_spikes(grid: spatial.Grid, start_min: float = 120.0,
                end_min: float = 600.0, multiplier: float = 4.5) -> demand.SpikeSchedule:
    cells = frozenset(r * grid.n_cols + c for r, c in SPIKE_BLOCK)
    return demand.SpikeSchedule(spikes=[demand.Spike(
        cell_ids=cells, start_min=start_min, end_min=end_min, multiplier=multiplier)])


def default_config(**overrides) -> harness.ExperimentConfig:
    """Benchmark-scale config: small planner budgets, short horizon."""
    box = bounding_box()
    base = dict(
        lat_min=box[0], lon_min=box[1], lat_max=box[2], lon_max=box[3],
        cell_size_miles=CELL_MILES,
        k=4, seed=0, n_agents=N_AGENTS,
        service_minutes=20.0, speed_mph=30.0,
        mcts_iterations=24, n_chains=16, alpha=0.99995, uct_c=1.44,
        max_realloc_gap_min=60.0, planning_horizon_min=90.0,
        horizon_min=720.0, n_eval_chains=5, eval_seeds=[1, 2, 3],
        surrogate_multipliers=[0.5, 1.0, 2.0, 3.0],
        surrogate_chains_per_mult=2, surrogate_horizon_min=720.0,
        forest_trees=30,
    )
    base.update(overrides)
    return harness.ExperimentConfig(**base)


def make_world(config: harness.ExperimentConfig | None = None,
               spikes: demand.SpikeSchedule | None = None,
               k: int | None = None) -> harness.World:
    config = config or default_config()
    grid = make_grid()
    model = make_model(grid)
    depots = make_depots(grid)
    records = make_history(grid, model)
    regions = spatial.segment_regions(grid, records, depots,
                                      k=k or config.k, seed=config.seed)
    return harness.World(grid=grid, depots=depots, model=model, regions=regions,
                         travel=travel.EuclideanTravel(grid=grid, speed_mph=config.speed_mph),
                         spikes=spikes)


def write_city(out_dir, spikes: bool = False, **config_overrides) -> str:
    """Emit incidents.csv, depots.csv, optional spikes.json, and config.json;
    returns the config path."""
    os.makedirs(out_dir, exist_ok=True)
    grid = make_grid()
    model = make_model(grid)
    records = make_history(grid, model)
    epoch = datetime(2024, 1, 1, tzinfo=timezone.utc)

    incidents_path = os.path.join(out_dir, "incidents.csv")
    with open(incidents_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "lat", "lon"])
        for rec in records:
            ts = (epoch + timedelta(minutes=rec.time_min)).isoformat()
            writer.writerow([ts, repr(rec.lat), repr(rec.lon)])

    depots_path = os.path.join(out_dir, "depots.csv")
    with open(depots_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["depot_id", "lat", "lon", "capacity"])
        for d in make_depots(grid):
            writer.writerow([d.id, repr(d.lat), repr(d.lon), d.capacity])

    overrides = dict(config_overrides)
    overrides.update(incidents_csv=incidents_path, depots_csv=depots_path)
    if spikes:
        spikes_path = os.path.join(out_dir, "spikes.json")
        demand.save_spikes(spikes_path, make_spikes(grid))
        overrides.update(spikes_json=spikes_path, scenario="spikes")
    config = default_config(**overrides)
    config_path = os.path.join(out_dir, "config.json")
    harness.save_config(config_path, config)
    return config_path
