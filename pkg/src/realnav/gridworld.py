"""Occupancy-grid worlds, planar range scans and no-sliding motion.

Cell ``(row, col)`` covers ``x in [ox + col*cs, ox + (col+1)*cs)`` and
``y in [oy + row*cs, oy + (row+1)*cs)``. In the text map format the first
grid line is the northernmost row, so files read like a top-down picture.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose
from .validation import check_int, check_positive

DEFAULT_RADIUS = 0.18
SAFETY_MARGIN = 1e-3
FREE, OCCUPIED = ".", "#"


class MapParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class GenerationError(RuntimeError):
    pass


class RaycastError(ValueError):
    pass


@dataclass(eq=False)
class OccupancyGrid:
    cells: np.ndarray  # bool, shape (height, width), True = occupied
    cell_size: float
    origin: tuple[float, float] = (0.0, 0.0)
    cell_size_text: str | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        cells = np.array(self.cells, dtype=bool)
        if cells.ndim != 2 or min(cells.shape) < 3:
            raise ValueError(f"grid must be at least 3x3, got shape {cells.shape}")
        check_positive(self.cell_size, "cell_size")
        if not (cells[0].all() and cells[-1].all() and cells[:, 0].all() and cells[:, -1].all()):
            raise ValueError("grid boundary must be fully occupied")
        cells.setflags(write=False)
        self.cells = cells
        self.cell_size = float(self.cell_size)
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def extent(self) -> tuple[float, float]:
        return (self.width * self.cell_size, self.height * self.cell_size)

    def __eq__(self, other):
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return (
            self.cell_size == other.cell_size
            and self.origin == other.origin
            and np.array_equal(self.cells, other.cells)
        )

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        col = math.floor((x - self.origin[0]) / self.cell_size)
        row = math.floor((y - self.origin[1]) / self.cell_size)
        return row, col

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return (
            self.origin[0] + (col + 0.5) * self.cell_size,
            self.origin[1] + (row + 0.5) * self.cell_size,
        )

    def in_bounds(self, row: int, col: int) -> bool:
        return 0 <= row < self.height and 0 <= col < self.width

    def occupied(self, row: int, col: int) -> bool:
        return not self.in_bounds(row, col) or bool(self.cells[row, col])

    def clearance_mask(self, radius: float) -> np.ndarray:
        """Cells whose centre is navigable for a disc of ``radius`` (cached)."""
        key = ("clearance", round(radius, 12))
        if key not in self._cache:
            self._cache[key] = _clearance_mask(self, radius)
        return self._cache[key]


@dataclass(frozen=True, eq=False)
class DepthScan:
    fov: float
    n_rays: int
    max_range: float
    ranges: np.ndarray

    def __post_init__(self):
        ranges = np.array(self.ranges, dtype=float)
        if ranges.shape != (self.n_rays,):
            raise ValueError(f"expected {self.n_rays} ranges, got shape {ranges.shape}")
        ranges.setflags(write=False)
        object.__setattr__(self, "ranges", ranges)

    def __eq__(self, other):
        if not isinstance(other, DepthScan):
            return NotImplemented
        return (
            self.fov == other.fov
            and self.n_rays == other.n_rays
            and self.max_range == other.max_range
            and np.array_equal(self.ranges, other.ranges)
        )

    def bearings(self) -> np.ndarray:
        return scan_bearings(self.fov, self.n_rays)

    def with_ranges(self, ranges) -> "DepthScan":
        return DepthScan(self.fov, self.n_rays, self.max_range, ranges)


@dataclass(frozen=True)
class AgentBody:
    radius: float = DEFAULT_RADIUS

    def __post_init__(self):
        check_positive(self.radius, "radius")


def scan_bearings(fov: float, n_rays: int) -> np.ndarray:
    if n_rays == 1:
        return np.zeros(1)
    k = np.arange(n_rays)
    return -fov / 2 + k * (fov / (n_rays - 1))


# ---------------------------------------------------------------- map files


def load_map(text: str) -> OccupancyGrid:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MapParseError("empty map file", 1)
    header = lines[0].split(" ")
    if len(header) != 2 or header[0] != "cellsize":
        raise MapParseError("expected header 'cellsize <decimal>'", 1)
    try:
        cell_size = float(header[1])
    except ValueError:
        raise MapParseError(f"invalid cellsize {header[1]!r}", 1) from None
    if not math.isfinite(cell_size) or cell_size <= 0:
        raise MapParseError(f"cellsize must be positive, got {header[1]!r}", 1)

    rows = lines[1:]
    if len(rows) < 3:
        raise MapParseError("map needs at least 3 rows", len(lines) + 1)
    width = len(rows[0])
    for i, row in enumerate(rows):
        lineno = i + 2
        if len(row) != width:
            raise MapParseError(f"row length {len(row)} differs from first row length {width}", lineno)
        bad = set(row) - {FREE, OCCUPIED}
        if bad:
            raise MapParseError(f"unknown characters {''.join(sorted(bad))!r}", lineno)
    if width < 3:
        raise MapParseError("map needs at least 3 columns", 2)

    height = len(rows)
    cells = np.array([[ch == OCCUPIED for ch in row] for row in reversed(rows)], dtype=bool)
    for i, row in enumerate(rows):
        edge_row = i in (0, height - 1)
        if (edge_row and FREE in row) or row[0] == FREE or row[-1] == FREE:
            raise MapParseError("map boundary is open", i + 2)
    return OccupancyGrid(cells, cell_size, (0.0, 0.0), cell_size_text=header[1])


def dump_map(grid: OccupancyGrid) -> str:
    size_text = grid.cell_size_text if grid.cell_size_text is not None else repr(grid.cell_size)
    lines = [f"cellsize {size_text}"]
    for row in grid.cells[::-1]:
        lines.append("".join(OCCUPIED if c else FREE for c in row))
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------- map generation


@dataclass
class _Room:
    r0: int
    c0: int
    r1: int  # inclusive
    c1: int

    @property
    def rows(self) -> int:
        return self.r1 - self.r0 + 1

    @property
    def cols(self) -> int:
        return self.c1 - self.c0 + 1


def generate_map(
    width: int,
    height: int,
    cell_size: float,
    room_count: int,
    seed: int,
    *,
    clutter: int = 0,
    agent_radius: float = DEFAULT_RADIUS,
) -> OccupancyGrid:
    """Procedural multi-room map built by recursive splitting.

    Every split wall gets a door at least three agent diameters wide, so the
    free space stays one connected region. ``clutter`` boxes per room are
    placed with enough clearance that they never create pockets.
    """
    check_int(width, "width", minimum=3)
    check_int(height, "height", minimum=3)
    check_positive(cell_size, "cell_size")
    check_int(room_count, "room_count", minimum=1)
    check_int(clutter, "clutter", minimum=0)
    rng = np.random.default_rng(seed)

    cells = np.zeros((height, width), dtype=bool)
    cells[0, :] = cells[-1, :] = cells[:, 0] = cells[:, -1] = True

    door_cells = math.ceil(3 * 2 * agent_radius / cell_size - 1e-9)
    min_side = door_cells + 4
    rooms = [_Room(1, 1, height - 2, width - 2)]
    if rooms[0].rows < 1 or rooms[0].cols < 1:
        raise GenerationError("grid has no interior")
    # doors: (axis, line index, lo, hi) with axis 'h' = horizontal wall at row
    doors: list[tuple[str, int, int, int]] = []

    while len(rooms) < room_count:
        order = sorted(range(len(rooms)), key=lambda i: -rooms[i].rows * rooms[i].cols)
        for idx in order:
            split = _try_split(rooms[idx], min_side, door_cells, doors, cells, rng)
            if split is not None:
                a, b = split
                rooms[idx : idx + 1] = [a, b]
                break
        else:
            raise GenerationError(
                f"cannot fit {room_count} rooms of side >= {min_side} cells into a "
                f"{width}x{height} grid (got {len(rooms)})"
            )

    if clutter:
        _add_clutter(cells, rooms, clutter, agent_radius, cell_size, rng)

    grid = OccupancyGrid(cells, cell_size)
    if count_free_components(grid) != 1:
        raise GenerationError("generated free space is not connected")
    return grid


def _try_split(room, min_side, door_cells, doors, cells, rng):
    # one wall cell + two sides of min_side
    vertical_ok = room.cols >= 2 * min_side + 1
    horizontal_ok = room.rows >= 2 * min_side + 1
    if not (vertical_ok or horizontal_ok):
        return None
    if vertical_ok and horizontal_ok:
        vertical = room.cols >= room.rows if room.cols != room.rows else bool(rng.integers(2))
    else:
        vertical = vertical_ok

    if vertical:
        lo, hi = room.c0 + min_side, room.c1 - min_side
        touching = [d for d in doors if d[0] == "h" and d[1] in (room.r0 - 1, room.r1 + 1)]
    else:
        lo, hi = room.r0 + min_side, room.r1 - min_side
        touching = [d for d in doors if d[0] == "v" and d[1] in (room.c0 - 1, room.c1 + 1)]
    candidates = [
        k for k in range(lo, hi + 1)
        if all(not (d[2] - 2 <= k <= d[3] + 2) for d in touching)
    ]
    if not candidates:
        return None
    k = int(rng.choice(candidates))

    if vertical:
        span_lo, span_hi = room.r0, room.r1
    else:
        span_lo, span_hi = room.c0, room.c1
    # keep the door off the room corners
    first = span_lo + 1
    last = span_hi - 1 - door_cells + 1
    if last < first:
        return None
    start = int(rng.integers(first, last + 1))
    door = (start, start + door_cells - 1)

    if vertical:
        cells[room.r0 : room.r1 + 1, k] = True
        cells[door[0] : door[1] + 1, k] = False
        doors.append(("v", k, door[0], door[1]))
        return _Room(room.r0, room.c0, room.r1, k - 1), _Room(room.r0, k + 1, room.r1, room.c1)
    cells[k, room.c0 : room.c1 + 1] = True
    cells[k, door[0] : door[1] + 1] = False
    doors.append(("h", k, door[0], door[1]))
    return _Room(room.r0, room.c0, k - 1, room.c1), _Room(k + 1, room.c0, room.r1, room.c1)


def _add_clutter(cells, rooms, per_room, agent_radius, cell_size, rng):
    gap = math.ceil((2 * agent_radius + 0.25) / cell_size)
    for room in rooms:
        for _ in range(per_room):
            for _attempt in range(30):
                h = int(rng.integers(2, 6))
                w = int(rng.integers(2, 6))
                r_lo, r_hi = room.r0 + gap, room.r1 - gap - h + 1
                c_lo, c_hi = room.c0 + gap, room.c1 - gap - w + 1
                if r_hi < r_lo or c_hi < c_lo:
                    break
                r = int(rng.integers(r_lo, r_hi + 1))
                c = int(rng.integers(c_lo, c_hi + 1))
                window = cells[r - gap : r + h + gap, c - gap : c + w + gap]
                if not window.any():
                    cells[r : r + h, c : c + w] = True
                    break


def count_free_components(grid: OccupancyGrid) -> int:
    """Number of 4-connected components of free cells (plain BFS)."""
    seen = np.zeros_like(grid.cells)
    components = 0
    free = ~grid.cells
    for r0, c0 in zip(*np.nonzero(free)):
        if seen[r0, c0]:
            continue
        components += 1
        seen[r0, c0] = True
        queue = deque([(r0, c0)])
        while queue:
            r, c = queue.popleft()
            for nr, nc in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
                if free[nr, nc] and not seen[nr, nc]:
                    seen[nr, nc] = True
                    queue.append((nr, nc))
    return components


# --------------------------------------------------------- collision queries


def _occupied_near(grid: OccupancyGrid, xmin, ymin, xmax, ymax):
    """Lower-left corners of occupied cells overlapping a world box."""
    cs = grid.cell_size
    c_lo = math.floor((xmin - grid.origin[0]) / cs)
    c_hi = math.floor((xmax - grid.origin[0]) / cs)
    r_lo = math.floor((ymin - grid.origin[1]) / cs)
    r_hi = math.floor((ymax - grid.origin[1]) / cs)
    rows = np.arange(r_lo, r_hi + 1)
    cols = np.arange(c_lo, c_hi + 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    inside = (rr >= 0) & (rr < grid.height) & (cc >= 0) & (cc < grid.width)
    occ = np.ones(rr.shape, dtype=bool)
    occ[inside] = grid.cells[rr[inside], cc[inside]]
    rr, cc = rr[occ], cc[occ]
    return grid.origin[0] + cc * cs, grid.origin[1] + rr * cs


def distance_to_occupied(grid: OccupancyGrid, x: float, y: float, search: float) -> float:
    """Distance from a point to the nearest occupied cell square within ``search``."""
    x0, y0 = _occupied_near(grid, x - search, y - search, x + search, y + search)
    if x0.size == 0:
        return math.inf
    cs = grid.cell_size
    dx = np.maximum(np.maximum(x0 - x, x - (x0 + cs)), 0.0)
    dy = np.maximum(np.maximum(y0 - y, y - (y0 + cs)), 0.0)
    return float(np.sqrt(dx * dx + dy * dy).min())


def is_navigable(grid: OccupancyGrid, p, radius: float) -> bool:
    """True iff a disc of ``radius`` at ``p`` overlaps no occupied cell.

    Cells count as full squares; touching (distance exactly ``radius``) is
    allowed.
    """
    x, y = float(p[0]), float(p[1])
    return distance_to_occupied(grid, x, y, radius) >= radius


def _clearance_mask(grid: OccupancyGrid, radius: float) -> np.ndarray:
    from scipy import ndimage

    # Exact disc-vs-square test for every cell centre: distance from a centre
    # to an occupied square is the centre-to-centre offset minus half a cell
    # per axis, clipped at zero.
    reach = math.ceil(radius / grid.cell_size) + 1
    offsets = np.arange(-reach, reach + 1)
    dr, dc = np.meshgrid(offsets, offsets, indexing="ij")
    gap_r = np.maximum(np.abs(dr) - 0.5, 0.0) * grid.cell_size
    gap_c = np.maximum(np.abs(dc) - 0.5, 0.0) * grid.cell_size
    footprint = gap_r**2 + gap_c**2 < radius**2
    blocked = ndimage.binary_dilation(grid.cells, structure=footprint, border_value=1)
    mask = ~blocked
    mask.setflags(write=False)
    return mask


# ----------------------------------------------------------------- raycast


def _cast_rays(grid: OccupancyGrid, ox: float, oy: float, angles: np.ndarray, max_range: float) -> np.ndarray:
    """Amanatides-Woo grid traversal for many rays at once."""
    cs = grid.cell_size
    gx = (ox - grid.origin[0]) / cs
    gy = (oy - grid.origin[1]) / cs
    col0, row0 = math.floor(gx), math.floor(gy)
    if grid.occupied(row0, col0):
        raise RaycastError(f"ray origin ({ox}, {oy}) lies inside an occupied cell")

    n = angles.size
    dx = np.cos(angles)
    dy = np.sin(angles)
    step_x = np.where(dx > 0, 1, -1)
    step_y = np.where(dy > 0, 1, -1)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t_delta_x = np.where(dx != 0, cs / np.abs(dx), np.inf)
        t_delta_y = np.where(dy != 0, cs / np.abs(dy), np.inf)
        next_x = np.where(dx > 0, col0 + 1 - gx, gx - col0) * cs
        next_y = np.where(dy > 0, row0 + 1 - gy, gy - row0) * cs
        t_max_x = np.where(dx != 0, next_x / np.abs(dx), np.inf)
        t_max_y = np.where(dy != 0, next_y / np.abs(dy), np.inf)

    col = np.full(n, col0)
    row = np.full(n, row0)
    result = np.full(n, float(max_range))
    active = np.arange(n)
    cells = grid.cells
    h, w = cells.shape
    while active.size:
        tx, ty = t_max_x[active], t_max_y[active]
        go_x = tx <= ty
        t = np.where(go_x, tx, ty)
        ax, ay = active[go_x], active[~go_x]
        col[ax] += step_x[ax]
        t_max_x[ax] += t_delta_x[ax]
        row[ay] += step_y[ay]
        t_max_y[ay] += t_delta_y[ay]

        beyond = t >= max_range
        r, c = row[active], col[active]
        inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        hit = np.ones(active.size, dtype=bool)
        hit[inside] = cells[r[inside], c[inside]]
        hit &= ~beyond
        result[active[hit]] = t[hit]
        active = active[~(hit | beyond)]
    return result


def raycast(grid: OccupancyGrid, origin, bearing: float, max_range: float) -> float:
    """Distance along a world-frame ray to the first occupied cell, clamped."""
    check_positive(max_range, "max_range")
    return float(_cast_rays(grid, float(origin[0]), float(origin[1]), np.array([float(bearing)]), max_range)[0])


def render_scan(grid: OccupancyGrid, pose: Pose, fov: float, n_rays: int, max_range: float) -> DepthScan:
    check_int(n_rays, "n_rays", minimum=1)
    check_positive(max_range, "max_range")
    check_positive(fov, "fov", allow_zero=True)
    local = scan_bearings(fov, n_rays)
    ranges = _cast_rays(grid, pose.x, pose.y, pose.theta + local, max_range)
    return DepthScan(fov, n_rays, max_range, ranges)


# ------------------------------------------------------------------ motion


def free_distance(grid: OccupancyGrid, x: float, y: float, heading: float, radius: float, horizon: float) -> float:
    """Distance a disc can travel along ``heading`` before touching a cell.

    Returns ``inf`` when nothing is hit within ``horizon``. Contact is the
    first time the disc centre comes within ``radius`` of an occupied
    square, i.e. ray versus each square's edges grown into capsules.
    """
    hx, hy = math.cos(heading), math.sin(heading)
    ex, ey = x + horizon * hx, y + horizon * hy
    pad = radius + grid.cell_size
    x0, y0 = _occupied_near(grid, min(x, ex) - pad, min(y, ey) - pad, max(x, ex) + pad, max(y, ey) + pad)
    if x0.size == 0:
        return math.inf
    cs = grid.cell_size
    x1, y1 = x0 + cs, y0 + cs
    best = np.full(x0.shape, np.inf)
    eps = 1e-12

    # flat faces of the grown square
    if hx > eps:
        t = (x0 - radius - x) / hx
        yc = y + t * hy
        best = np.where((t >= -eps) & (yc >= y0) & (yc <= y1), np.minimum(best, t), best)
    elif hx < -eps:
        t = (x1 + radius - x) / hx
        yc = y + t * hy
        best = np.where((t >= -eps) & (yc >= y0) & (yc <= y1), np.minimum(best, t), best)
    if hy > eps:
        t = (y0 - radius - y) / hy
        xc = x + t * hx
        best = np.where((t >= -eps) & (xc >= x0) & (xc <= x1), np.minimum(best, t), best)
    elif hy < -eps:
        t = (y1 + radius - y) / hy
        xc = x + t * hx
        best = np.where((t >= -eps) & (xc >= x0) & (xc <= x1), np.minimum(best, t), best)

    # rounded corners
    for cx, cy in ((x0, y0), (x0, y1), (x1, y0), (x1, y1)):
        fx, fy = x - cx, y - cy
        b = fx * hx + fy * hy
        c = fx * fx + fy * fy - radius * radius
        disc = b * b - c
        ok = disc >= 0
        root = np.sqrt(np.where(ok, disc, 0.0))
        t = -b - root
        # entering the circle ahead of us, or already touching and moving inwards
        valid = ok & ((t >= -eps) | ((c <= eps) & (b < 0)))
        best = np.where(valid, np.minimum(best, np.maximum(t, 0.0)), best)

    t_hit = float(best.min())
    return max(t_hit, 0.0)


def move_with_collision(grid: OccupancyGrid, pose: Pose, forward: float, radius: float) -> tuple[Pose, bool]:
    """Translate along the heading, stopping short of contact instead of sliding."""
    if forward <= 0.0:
        return pose, False
    clear = free_distance(grid, pose.x, pose.y, pose.theta, radius, forward + radius)
    if clear - SAFETY_MARGIN >= forward:
        travel, collided = forward, False
    else:
        travel, collided = max(0.0, clear - SAFETY_MARGIN), True
    moved = Pose(pose.x + travel * math.cos(pose.theta), pose.y + travel * math.sin(pose.theta), pose.theta)
    return moved, collided
