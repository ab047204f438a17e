"""Cell-to-cell travel times and en-route position interpolation.

Two interchangeable models: constant-speed straight-line travel between cell
centroids, or a precomputed lookup table (e.g. produced offline by a routing
engine). The lookup variant stores no path geometry, so interpolation places
the mover on the straight segment between the endpoint centroids and snaps to
the nearest cell centroid.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

from .spatial import Grid, locate


class TravelError(ValueError):
    pass


@dataclass(frozen=True)
class EuclideanTravel:
    grid: Grid
    speed_mph: float

    def __post_init__(self):
        if self.speed_mph <= 0:
            raise TravelError(f"speed must be positive, got {self.speed_mph}")


@dataclass(frozen=True)
class LookupTravel:
    grid: Grid
    table: dict[tuple[int, int], float]  # (from_cell, to_cell) -> seconds


TravelModel = EuclideanTravel | LookupTravel


def travel_time(model: TravelModel, from_cell: int, to_cell: int) -> float:
    """Seconds to travel between two cell centroids."""
    if from_cell == to_cell:
        return 0.0
    if isinstance(model, EuclideanTravel):
        miles = model.grid.centroid_distance_miles(from_cell, to_cell)
        return miles / model.speed_mph * 3600.0
    try:
        return model.table[(from_cell, to_cell)]
    except KeyError:
        raise TravelError(f"lookup table has no entry for pair ({from_cell}, {to_cell})")


def interpolate_position(model: TravelModel, from_cell: int, to_cell: int,
                         elapsed_s: float) -> int:
    """Cell occupied after ``elapsed_s`` seconds of the from->to leg."""
    total = travel_time(model, from_cell, to_cell)
    if elapsed_s < 0 or elapsed_s > total:
        raise TravelError(f"elapsed {elapsed_s}s outside leg duration {total}s")
    if elapsed_s == 0 or total == 0:
        return from_cell
    if elapsed_s == total:
        return to_cell
    frac = elapsed_s / total
    grid = model.grid
    lat_a, lon_a = grid.cells[from_cell].centroid
    lat_b, lon_b = grid.cells[to_cell].centroid
    point = (lat_a + frac * (lat_b - lat_a), lon_a + frac * (lon_b - lon_a))
    if isinstance(model, EuclideanTravel):
        return locate(grid, point)
    # lookup: nearest centroid to the straight-line point, ties to lowest id
    px, py = grid.project(*point)
    best, best_d2 = -1, math.inf
    for cid in range(grid.n_cells):
        cx, cy = grid.cell_xy(cid)
        d2 = (cx - px) ** 2 + (cy - py) ** 2
        if d2 < best_d2:
            best, best_d2 = cid, d2
    return best


def load_lookup_csv(path, grid: Grid) -> LookupTravel:
    """Read `from_cell,to_cell,seconds` rows; every ordered pair must appear."""
    table: dict[tuple[int, int], float] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                key = (int(row["from_cell"]), int(row["to_cell"]))
                seconds = float(row["seconds"])
            except (KeyError, ValueError) as exc:
                raise TravelError(f"{path}:{lineno}: bad lookup row: {exc}") from exc
            if seconds < 0:
                raise TravelError(f"{path}:{lineno}: negative travel time {seconds}")
            table[key] = seconds
    for a in range(grid.n_cells):
        for b in range(grid.n_cells):
            if (a, b) not in table:
                raise TravelError(f"{path}: missing ordered pair ({a}, {b})")
    return LookupTravel(grid=grid, table=table)


def save_lookup_csv(path, model: LookupTravel) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["from_cell", "to_cell", "seconds"])
        for (a, b), s in sorted(model.table.items()):
            writer.writerow([a, b, repr(float(s))])
