import math

import numpy as np
import pytest
from hypothesis import settings

from realnav.geometry import Pose, wrap_angle
from realnav.gridworld import generate_map, load_map

settings.register_profile("default", max_examples=200, deadline=None)
settings.load_profile("default")


def pose_close(a: Pose, b: Pose, tol: float) -> bool:
    return abs(a.x - b.x) <= tol and abs(a.y - b.y) <= tol and abs(wrap_angle(a.theta - b.theta)) <= tol


def box_map(width: int, height: int, cell_size: float = 0.1, inner=()) -> str:
    """Closed rectangle of free cells; ``inner`` lists (row, col) walls, row 0 at the top."""
    rows = [["#" if r in (0, height - 1) or c in (0, width - 1) else "." for c in range(width)] for r in range(height)]
    for r, c in inner:
        rows[r][c] = "#"
    return f"cellsize {cell_size}\n" + "".join("".join(r) + "\n" for r in rows)


@pytest.fixture(scope="session")
def open_room():
    return load_map(box_map(60, 60))


@pytest.fixture(scope="session")
def house():
    return generate_map(120, 90, 0.1, 4, seed=11, clutter=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TAU = 2 * math.pi
