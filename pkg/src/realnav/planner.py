"""Geodesic distance fields, shortest paths and episode sampling.

Planning happens on the radius-inflated grid: a cell is traversable when a
disc of the agent's radius centred on it touches no occupied cell. Moves are
8-connected with costs ``cell_size`` and ``cell_size * sqrt(2)``; a diagonal
move needs both orthogonal neighbours free. The octile metric overestimates
true Euclidean path lengths by at most ``sqrt(4 - 2*sqrt(2)) ~ 1.0824``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .geometry import Pose
from .gridworld import DEFAULT_RADIUS, GenerationError, OccupancyGrid, is_navigable
from .validation import check_int, check_positive

SQRT2 = math.sqrt(2.0)
OCTILE_BOUND = math.sqrt(4.0 - 2.0 * SQRT2)

# (d_row, d_col, cost in cells); each undirected edge listed once
_EDGES = ((0, 1, 1.0), (1, 0, 1.0), (1, 1, SQRT2), (1, -1, SQRT2))
_NEIGHBOURS = (
    (0, 1, 1.0), (0, -1, 1.0), (1, 0, 1.0), (-1, 0, 1.0),
    (1, 1, SQRT2), (1, -1, SQRT2), (-1, 1, SQRT2), (-1, -1, SQRT2),
)


class PlanningError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DistanceField:
    grid: OccupancyGrid
    goal: tuple[float, float]
    goal_cell: tuple[int, int]
    radius: float
    distance: np.ndarray  # metres, inf where unreachable

    def at_cell(self, row: int, col: int) -> float:
        if not self.grid.in_bounds(row, col):
            return math.inf
        return float(self.distance[row, col])

    def reachable(self, row: int, col: int) -> bool:
        return math.isfinite(self.at_cell(row, col))


def navigation_graph(grid: OccupancyGrid, radius: float):
    """Sparse 8-connected graph over the inflated free cells (cached per radius)."""
    key = ("graph", round(radius, 12))
    if key in grid._cache:
        return grid._cache[key]
    free = grid.clearance_mask(radius)
    h, w = free.shape
    index = np.arange(h * w).reshape(h, w)
    src, dst, cost = [], [], []
    for dr, dc, c in _EDGES:
        r0, r1 = max(0, -dr), h - max(0, dr)
        c0, c1 = max(0, -dc), w - max(0, dc)
        a = free[r0:r1, c0:c1]
        b = free[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
        ok = a & b
        if dr and dc:
            ok &= free[r0 + dr : r1 + dr, c0:c1] & free[r0:r1, c0 + dc : c1 + dc]
        src.append(index[r0:r1, c0:c1][ok])
        dst.append(index[r0 + dr : r1 + dr, c0 + dc : c1 + dc][ok])
        cost.append(np.full(int(ok.sum()), c))
    src, dst, cost = np.concatenate(src), np.concatenate(dst), np.concatenate(cost)
    graph = coo_matrix((cost, (src, dst)), shape=(h * w, h * w)).tocsr()
    grid._cache[key] = graph
    return graph


def _snap_cell(grid: OccupancyGrid, free: np.ndarray, x: float, y: float):
    row, col = grid.cell_of(x, y)
    if grid.in_bounds(row, col) and free[row, col]:
        return row, col
    best, best_d = None, math.inf
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            r, c = row + dr, col + dc
            if grid.in_bounds(r, c) and free[r, c]:
                cx, cy = grid.cell_center(r, c)
                d = math.hypot(cx - x, cy - y)
                if d < best_d:
                    best, best_d = (r, c), d
    return best


def distance_field(grid: OccupancyGrid, goal, radius: float = DEFAULT_RADIUS) -> DistanceField:
    """Dijkstra geodesic distance from every cell to ``goal``."""
    check_positive(radius, "radius")
    gx, gy = float(goal[0]), float(goal[1])
    if not is_navigable(grid, (gx, gy), radius):
        raise PlanningError(f"goal ({gx}, {gy}) is not navigable for radius {radius}")
    free = grid.clearance_mask(radius)
    cell = _snap_cell(grid, free, gx, gy)
    if cell is None:
        raise PlanningError(f"no inflated-free cell near goal ({gx}, {gy})")
    graph = navigation_graph(grid, radius)
    node = cell[0] * grid.width + cell[1]
    dist = dijkstra(graph, directed=False, indices=node)
    dist = dist.reshape(grid.height, grid.width) * grid.cell_size
    dist.setflags(write=False)
    return DistanceField(grid, (gx, gy), cell, float(radius), dist)


def geodesic_distance(field: DistanceField, p) -> float:
    """Field value of the cell containing ``p`` (inf when unreachable)."""
    row, col = field.grid.cell_of(float(p[0]), float(p[1]))
    return field.at_cell(row, col)


def descend(field: DistanceField, row: int, col: int):
    """Next cell on the steepest-slope descent, or None at the goal.

    Choosing the largest drop per unit length always follows a tight
    Dijkstra edge, so walked length equals the field value.
    """
    d = field.distance
    here = d[row, col]
    if here == 0.0:
        return None
    best, best_slope = None, -math.inf
    for dr, dc, cost in _NEIGHBOURS:
        r, c = row + dr, col + dc
        if not field.grid.in_bounds(r, c):
            continue
        if dr and dc and not (math.isfinite(d[row + dr, col]) and math.isfinite(d[row, col + dc])):
            continue  # not a graph edge: would cut an inflated corner
        there = d[r, c]
        if there < here:
            slope = (here - there) / cost
            if slope > best_slope:
                best, best_slope = (r, c), slope
    return best


def shortest_path(field: DistanceField, start) -> list[tuple[float, float]]:
    """Cell-centre polyline from ``start``'s cell down to the goal cell."""
    grid = field.grid
    row, col = grid.cell_of(float(start[0]), float(start[1]))
    if not field.reachable(row, col):
        raise PlanningError(f"start ({start[0]}, {start[1]}) cannot reach the goal")
    path = [grid.cell_center(row, col)]
    cell = (row, col)
    while True:
        cell = descend(field, *cell)
        if cell is None:
            return path
        path.append(grid.cell_center(*cell))


def polyline_length(points) -> float:
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return 0.0
    return float(np.hypot(*np.diff(pts, axis=0).T).sum())


# ------------------------------------------------------------------ episodes


@dataclass(frozen=True)
class Episode:
    id: str
    map_id: str
    start: Pose
    goal: tuple[float, float]
    geodesic_start: float
    euclidean_start: float

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "map_id": self.map_id,
            "start": self.start.to_dict(),
            "goal": {"x": self.goal[0], "y": self.goal[1]},
            "geodesic_start": self.geodesic_start,
            "euclidean_start": self.euclidean_start,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        return cls(
            id=str(d["id"]),
            map_id=str(d["map_id"]),
            start=Pose.from_dict(d["start"]),
            goal=(float(d["goal"]["x"]), float(d["goal"]["y"])),
            geodesic_start=float(d["geodesic_start"]),
            euclidean_start=float(d["euclidean_start"]),
        )


@dataclass(frozen=True)
class EpisodeConstraints:
    min_geo: float = 1.5
    max_geo: float = 15.0
    min_ratio: float = 1.0

    def __post_init__(self):
        check_positive(self.min_geo, "min_geo")
        check_positive(self.max_geo, "max_geo")
        check_positive(self.min_ratio, "min_ratio")
        if self.max_geo < self.min_geo:
            raise ValueError("max_geo must be >= min_geo")


RATIO_SLACK = 1e-9


def generate_episodes(
    grid: OccupancyGrid,
    n: int,
    constraints: EpisodeConstraints | None = None,
    rng: np.random.Generator | int = 0,
    *,
    map_id: str = "map",
    radius: float = DEFAULT_RADIUS,
    max_attempts: int | None = None,
) -> list[Episode]:
    """Sample ``n`` start/goal pairs at cell centres meeting the distance band.

    Goals are drawn uniformly from the inflated free cells; for each goal a
    start is drawn uniformly among cells whose geodesic distance and
    geodesic/Euclidean ratio satisfy ``constraints``.
    """
    check_int(n, "n", minimum=0)
    constraints = constraints or EpisodeConstraints()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    free = grid.clearance_mask(radius)
    cells = np.argwhere(free)
    if cells.size == 0:
        raise GenerationError("map has no navigable cells")
    attempts = max_attempts if max_attempts is not None else max(50, 20 * n)
    cs = grid.cell_size
    rows_all, cols_all = np.indices(free.shape)

    episodes: list[Episode] = []
    for _ in range(attempts):
        if len(episodes) == n:
            break
        gr, gc = cells[rng.integers(len(cells))]
        goal = grid.cell_center(int(gr), int(gc))
        field = distance_field(grid, goal, radius)
        d = field.distance
        euclid = np.hypot(rows_all - gr, cols_all - gc) * cs
        with np.errstate(divide="ignore", invalid="ignore"):
            ok = (
                np.isfinite(d)
                & (d >= constraints.min_geo)
                & (d <= constraints.max_geo)
                & (euclid > 0)
                & (d >= constraints.min_ratio * euclid - RATIO_SLACK)
            )
        candidates = np.argwhere(ok)
        if len(candidates) == 0:
            continue
        sr, sc = candidates[rng.integers(len(candidates))]
        heading = float(rng.uniform(-math.pi, math.pi))
        sx, sy = grid.cell_center(int(sr), int(sc))
        episodes.append(
            Episode(
                id=f"{map_id}-{len(episodes):05d}",
                map_id=map_id,
                start=Pose(sx, sy, heading),
                goal=goal,
                geodesic_start=float(d[sr, sc]),
                euclidean_start=float(euclid[sr, sc]),
            )
        )
    if len(episodes) < n:
        raise GenerationError(
            f"only {len(episodes)} of {n} episodes satisfy {constraints} after {attempts} attempts"
        )
    return episodes


def save_episodes(episodes, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_dict()) + "\n")


def load_episodes(path) -> list[Episode]:
    with open(path, encoding="utf-8") as fh:
        return [Episode.from_dict(json.loads(line)) for line in fh if line.strip()]
