"""Per-cell Poisson incident model: fitting, chain sampling, spike scenarios.

All rates are incidents per minute. Sampling draws exponential inter-arrival
times per cell (restarting at each piecewise-constant rate boundary, which is
exact by memorylessness) and merges the per-cell streams into one ordered
chain. Each cell gets its own deterministic substream derived from
(seed, cell_id), so adding a spike to one cell never perturbs another cell's
draws.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import spatial


class DemandError(ValueError):
    pass


@dataclass(frozen=True)
class IncidentRecord:
    time_min: float
    lat: float
    lon: float
    cell_id: int


@dataclass(frozen=True)
class Incident:
    """One sampled or replayed incident: arrival time (minutes) and cell."""
    time: float
    cell_id: int
    idx: int  # position within its chain


@dataclass
class PoissonModel:
    rate_per_cell: dict[int, float]
    fitted_over_minutes: float

    def total_rate(self) -> float:
        return sum(self.rate_per_cell.values())

    def scaled(self, factor: float) -> "PoissonModel":
        return PoissonModel({c: r * factor for c, r in self.rate_per_cell.items()},
                            self.fitted_over_minutes)

    def restricted(self, cell_ids) -> "PoissonModel":
        keep = set(cell_ids)
        return PoissonModel({c: r for c, r in self.rate_per_cell.items() if c in keep},
                            self.fitted_over_minutes)


@dataclass(frozen=True)
class Spike:
    cell_ids: frozenset[int]
    start_min: float
    end_min: float
    multiplier: float


@dataclass
class SpikeSchedule:
    spikes: list[Spike] = field(default_factory=list)

    def __post_init__(self):
        for s in self.spikes:
            if s.multiplier < 1:
                raise DemandError(f"spike multiplier must be >= 1, got {s.multiplier}")
            if s.end_min <= s.start_min:
                raise DemandError(f"empty spike window [{s.start_min}, {s.end_min})")

    def multiplier_at(self, cell_id: int, t: float) -> float:
        m = 1.0
        for s in self.spikes:
            if cell_id in s.cell_ids and s.start_min <= t < s.end_min:
                m *= s.multiplier
        return m

    def boundaries(self, cell_id: int, t0: float, t1: float) -> list[float]:
        cuts = {t0, t1}
        for s in self.spikes:
            if cell_id in s.cell_ids:
                for t in (s.start_min, s.end_min):
                    if t0 < t < t1:
                        cuts.add(t)
        return sorted(cuts)


@dataclass
class IncidentChain:
    incidents: list[Incident]
    horizon: tuple[float, float]

    def __len__(self):
        return len(self.incidents)

    def __iter__(self):
        return iter(self.incidents)

    def restricted(self, cell_ids) -> "IncidentChain":
        keep = set(cell_ids)
        subset = [i for i in self.incidents if i.cell_id in keep]
        subset = [Incident(i.time, i.cell_id, n) for n, i in enumerate(subset)]
        return IncidentChain(subset, self.horizon)


def fit_poisson(records, grid: spatial.Grid, observed_minutes: float) -> PoissonModel:
    """MLE fit: each cell's rate is its empirical incident count per minute."""
    if observed_minutes <= 0:
        raise DemandError(f"observation window must be positive, got {observed_minutes}")
    counts: dict[int, int] = {c.id: 0 for c in grid.cells}
    for rec in records:
        counts[rec.cell_id] += 1
    rates = {cid: n / observed_minutes for cid, n in counts.items()}
    return PoissonModel(rate_per_cell=rates, fitted_over_minutes=observed_minutes)


def region_rate(model: PoissonModel, region: spatial.Region) -> float:
    return sum(model.rate_per_cell.get(cid, 0.0) for cid in region.cell_ids)


def sample_chain(model: PoissonModel, horizon: tuple[float, float], seed: int,
                 spikes: SpikeSchedule | None = None) -> IncidentChain:
    """Sample one incident chain over [t0, t1) from the per-cell model."""
    t0, t1 = horizon
    if t1 <= t0:
        raise DemandError(f"horizon end {t1} not after start {t0}")
    spikes = spikes or SpikeSchedule()

    streams = []
    for cell_id in sorted(model.rate_per_cell):
        base = model.rate_per_cell[cell_id]
        if base <= 0:
            continue
        rng = np.random.default_rng([seed, cell_id])
        times = []
        cuts = spikes.boundaries(cell_id, t0, t1)
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            rate = base * spikes.multiplier_at(cell_id, lo)
            if rate <= 0:
                continue
            t = lo
            while True:
                t += rng.exponential(1.0 / rate)
                if t >= hi:
                    break
                times.append(t)
        if times:
            streams.append([(t, cell_id) for t in times])

    merged = list(heapq.merge(*streams))
    incidents = []
    last = -math.inf
    for n, (t, cell_id) in enumerate(merged):
        if t <= last:  # break exact ties with a vanishing offset
            t = math.nextafter(last, math.inf)
        incidents.append(Incident(time=t, cell_id=cell_id, idx=n))
        last = t
    return IncidentChain(incidents=incidents, horizon=(t0, t1))


# ---------------------------------------------------------------------------
# file formats

def load_incidents_csv(path, grid: spatial.Grid) -> tuple[list[IncidentRecord], float]:
    """Read `timestamp,lat,lon` rows (ISO-8601 UTC) into records.

    Times become minutes since the earliest timestamp. Returns the records
    and the observed span in minutes.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                ts = datetime.fromisoformat(row["timestamp"].replace("Z", "+00:00"))
                if ts.tzinfo is None:
                    ts = ts.replace(tzinfo=timezone.utc)
                lat, lon = float(row["lat"]), float(row["lon"])
            except (KeyError, ValueError) as exc:
                raise DemandError(f"{path}:{lineno}: bad incident row: {exc}") from exc
            rows.append((ts, lat, lon))
    if not rows:
        raise DemandError(f"{path}: no incident rows")
    epoch = min(ts for ts, _, _ in rows)
    records = []
    for ts, lat, lon in rows:
        t_min = (ts - epoch).total_seconds() / 60.0
        records.append(IncidentRecord(time_min=t_min, lat=lat, lon=lon,
                                      cell_id=spatial.locate(grid, (lat, lon))))
    span = max(r.time_min for r in records)
    return records, span


def save_model(path, model: PoissonModel) -> None:
    payload = {
        "rates": {str(c): r for c, r in sorted(model.rate_per_cell.items())},
        "fitted_over_minutes": model.fitted_over_minutes,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> PoissonModel:
    with open(path) as fh:
        payload = json.load(fh)
    rates = {int(c): float(r) for c, r in payload["rates"].items()}
    return PoissonModel(rate_per_cell=rates,
                        fitted_over_minutes=float(payload["fitted_over_minutes"]))


def load_spikes(path) -> SpikeSchedule:
    with open(path) as fh:
        entries = json.load(fh)
    spikes = [Spike(cell_ids=frozenset(e["cells"]), start_min=float(e["start_min"]),
                    end_min=float(e["end_min"]), multiplier=float(e["multiplier"]))
              for e in entries]
    return SpikeSchedule(spikes=spikes)


def save_spikes(path, schedule: SpikeSchedule) -> None:
    entries = [{"cells": sorted(s.cell_ids), "start_min": s.start_min,
                "end_min": s.end_min, "multiplier": s.multiplier}
               for s in schedule.spikes]
    with open(path, "w") as fh:
        json.dump(entries, fh, indent=2, sort_keys=True)
        fh.write("\n")
