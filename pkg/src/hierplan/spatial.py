"""Spatial environment: square-cell grid, incident clustering, region segmentation.

Coordinates are latitude/longitude, flattened with a local equirectangular
projection anchored at the grid origin. At city scale the curvature error is
far below one cell, which keeps every distance computation plain Euclidean
arithmetic in miles.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

MILES_PER_DEG_LAT = 69.172


class SpatialError(ValueError):
    pass


@dataclass(frozen=True)
class Cell:
    id: int
    row: int
    col: int
    centroid: tuple[float, float]  # (lat, lon)


@dataclass(frozen=True)
class Grid:
    origin: tuple[float, float]  # (lat, lon) of the south-west corner
    cell_size_miles: float
    n_rows: int
    n_cols: int
    cells: list[Cell] = field(repr=False)

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    def project(self, lat: float, lon: float) -> tuple[float, float]:
        """Map lat/lon to (x, y) miles east/north of the grid origin."""
        lat0, lon0 = self.origin
        x = (lon - lon0) * math.cos(math.radians(lat0)) * MILES_PER_DEG_LAT
        y = (lat - lat0) * MILES_PER_DEG_LAT
        return x, y

    def unproject(self, x: float, y: float) -> tuple[float, float]:
        lat0, lon0 = self.origin
        lat = lat0 + y / MILES_PER_DEG_LAT
        lon = lon0 + x / (math.cos(math.radians(lat0)) * MILES_PER_DEG_LAT)
        return lat, lon

    def cell_xy(self, cell_id: int) -> tuple[float, float]:
        """Centroid of a cell in projected mile coordinates."""
        cell = self.cells[cell_id]
        s = self.cell_size_miles
        return (cell.col + 0.5) * s, (cell.row + 0.5) * s

    def centroid_distance_miles(self, a: int, b: int) -> float:
        ax, ay = self.cell_xy(a)
        bx, by = self.cell_xy(b)
        return math.hypot(ax - bx, ay - by)


@dataclass
class Region:
    id: int
    cell_ids: set[int]
    depot_ids: set[int]


def build_grid(bounding_box: tuple[float, float, float, float],
               cell_size_miles: float) -> Grid:
    """Tile a (lat_min, lon_min, lat_max, lon_max) box with square cells.

    Partial trailing cells are padded to full size, so the grid may extend
    slightly past the box's north/east edges. Cell ids run row-major from the
    south-west corner.
    """
    if cell_size_miles <= 0:
        raise SpatialError(f"cell size must be positive, got {cell_size_miles}")
    lat_min, lon_min, lat_max, lon_max = bounding_box
    if lat_max <= lat_min or lon_max <= lon_min:
        raise SpatialError(f"degenerate bounding box {bounding_box}")

    origin = (lat_min, lon_min)
    lat0 = math.radians(lat_min)
    width = (lon_max - lon_min) * math.cos(lat0) * MILES_PER_DEG_LAT
    height = (lat_max - lat_min) * MILES_PER_DEG_LAT
    # tiny slack so an exact multiple of the cell size does not gain a cell
    n_cols = max(1, math.ceil(width / cell_size_miles - 1e-9))
    n_rows = max(1, math.ceil(height / cell_size_miles - 1e-9))

    cells = []
    s = cell_size_miles
    for row in range(n_rows):
        for col in range(n_cols):
            cid = row * n_cols + col
            lat, lon = _unproject_from(origin, (col + 0.5) * s, (row + 0.5) * s)
            cells.append(Cell(id=cid, row=row, col=col, centroid=(lat, lon)))
    return Grid(origin=origin, cell_size_miles=s, n_rows=n_rows,
                n_cols=n_cols, cells=cells)


def _unproject_from(origin, x, y):
    lat0, lon0 = origin
    lat = lat0 + y / MILES_PER_DEG_LAT
    lon = lon0 + x / (math.cos(math.radians(lat0)) * MILES_PER_DEG_LAT)
    return lat, lon


def locate(grid: Grid, point: tuple[float, float]) -> int:
    """Cell id containing a (lat, lon) point.

    Points exactly on a shared edge or corner belong to the cell with the
    lower (row, col).
    """
    x, y = grid.project(*point)
    s = grid.cell_size_miles
    col = _axis_index(x, s, grid.n_cols)
    row = _axis_index(y, s, grid.n_rows)
    if col is None or row is None:
        raise SpatialError(f"point {point} outside grid bounding box")
    return row * grid.n_cols + col


def _axis_index(v: float, s: float, n: int) -> int | None:
    if v < 0 or v > n * s:
        return None
    i = int(math.floor(v / s))
    # boundary points belong to the lower-index cell
    if i > 0 and v == i * s:
        i -= 1
    return min(i, n - 1)


def kmeans(points: np.ndarray, k: int, seed: int,
           max_iter: int = 100, tol: float = 1e-7) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's k-means on 2-D points (any planar unit, typically miles).

    Centers are initialized uniformly at random from distinct observed
    points. A center that loses all its points is re-seeded at the point
    currently farthest from its assigned center. Returns (centers (k, 2),
    assignment (n,)).
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 2:
        raise SpatialError(f"expected (n, 2) points, got shape {points.shape}")
    distinct = np.unique(points, axis=0)
    if k < 1 or k > len(distinct):
        raise SpatialError(f"k={k} but only {len(distinct)} distinct points")

    rng = np.random.default_rng(seed)
    centers = distinct[rng.choice(len(distinct), size=k, replace=False)].copy()

    assignment = np.zeros(len(points), dtype=int)
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assignment = d2.argmin(axis=1)
        new_centers = centers.copy()
        for c in range(k):
            members = points[assignment == c]
            if len(members) == 0:
                worst = d2[np.arange(len(points)), assignment].argmax()
                new_centers[c] = points[worst]
            else:
                new_centers[c] = members.mean(axis=0)
        shift = np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max()
        centers = new_centers
        if shift < tol:
            break
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assignment = d2.argmin(axis=1)
    return centers, assignment


def segment_regions(grid: Grid, incidents, depots, k: int, seed: int) -> list[Region]:
    """Partition the grid into regions around incident hotspots.

    Incident locations are clustered with k-means; each cell holding at least
    one incident joins the cluster that contributed the most of its incidents
    (ties to the lowest cluster id). Cells without incidents join the region
    of the nearest incident-bearing cell so the whole grid is partitioned.
    Depots inherit their cell's region.

    ``incidents`` need (lat, lon) attributes; ``depots`` need (id, lat, lon).
    """
    if not incidents:
        raise SpatialError("cannot segment regions without incidents")
    if k < 1:
        raise SpatialError(f"k must be >= 1, got {k}")

    pts = np.array([grid.project(inc.lat, inc.lon) for inc in incidents])
    _, assignment = kmeans(pts, k, seed)

    votes: dict[int, np.ndarray] = {}
    for inc, cluster in zip(incidents, assignment):
        cid = locate(grid, (inc.lat, inc.lon))
        votes.setdefault(cid, np.zeros(k, dtype=int))[cluster] += 1

    cell_region: dict[int, int] = {}
    for cid, counts in votes.items():
        cell_region[cid] = int(counts.argmax())  # argmax ties -> lowest id

    seeded = sorted(cell_region)
    for cell in grid.cells:
        if cell.id in cell_region:
            continue
        cx, cy = grid.cell_xy(cell.id)
        best = min(seeded, key=lambda s: ((grid.cell_xy(s)[0] - cx) ** 2
                                          + (grid.cell_xy(s)[1] - cy) ** 2, s))
        cell_region[cell.id] = cell_region[best]

    regions: dict[int, Region] = {}
    for cid, rid in cell_region.items():
        regions.setdefault(rid, Region(id=rid, cell_ids=set(), depot_ids=set())).cell_ids.add(cid)
    for depot in depots:
        cid = locate(grid, (depot.lat, depot.lon))
        rid = cell_region[cid]
        regions[rid].depot_ids.add(depot.id)

    out = [regions[rid] for rid in sorted(regions)]
    for region in out:
        if not region.depot_ids:
            log.warning("region %d has no depots and cannot host agents", region.id)
    return out


def save_regions(path, regions: list[Region], k: int, seed: int) -> None:
    payload = {
        "regions": [
            {"id": r.id, "cell_ids": sorted(r.cell_ids), "depot_ids": sorted(r.depot_ids)}
            for r in sorted(regions, key=lambda r: r.id)
        ],
        "k": k,
        "seed": seed,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_regions(path) -> tuple[list[Region], int, int]:
    with open(path) as fh:
        payload = json.load(fh)
    regions = [Region(id=r["id"], cell_ids=set(r["cell_ids"]),
                      depot_ids=set(r["depot_ids"]))
               for r in payload["regions"]]
    return regions, payload["k"], payload["seed"]
