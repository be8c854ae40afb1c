"""SE(2) pose algebra and the goal-vector update.

Conventions: world x east, y north, theta CCW from +x. Agent-local +x is
forward and +y is left. Angles are wrapped to the half-open interval
(-pi, pi] so that -pi has a single representation (pi).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

FORWARD_STEP = 0.25
TURN_ANGLE = math.pi / 6


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    if not math.isfinite(theta):
        raise ValueError(f"cannot wrap non-finite angle {theta!r}")
    wrapped = math.fmod(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    elif wrapped > math.pi:
        wrapped -= 2.0 * math.pi
    return wrapped


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorised :func:`wrap_angle`."""
    theta = np.asarray(theta, dtype=float)
    wrapped = np.fmod(theta, 2.0 * np.pi)
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    return np.where(wrapped > np.pi, wrapped - 2.0 * np.pi, wrapped)


class Action(str, enum.Enum):
    STOP = "STOP"
    MOVE_FORWARD = "MOVE_FORWARD"
    TURN_LEFT = "TURN_LEFT"
    TURN_RIGHT = "TURN_RIGHT"

    def mirrored(self) -> "Action":
        if self is Action.TURN_LEFT:
            return Action.TURN_RIGHT
        if self is Action.TURN_RIGHT:
            return Action.TURN_LEFT
        return self


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite pose position ({self.x}, {self.y})")

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "theta": self.theta}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(float(d["x"]), float(d["y"]), float(d["theta"]))


@dataclass(frozen=True)
class Egomotion:
    """Rigid motion between consecutive agent frames.

    ``ex`` is forward and ``ey`` left, both in metres in the earlier frame;
    ``etheta`` is the CCW yaw change. A Habitat-style ``(x, y, z)`` tuple
    maps to ``(ey, 0, ex)``: x is left, y is the (always zero) vertical axis
    and z is forward.
    """

    ex: float
    ey: float
    etheta: float

    def __post_init__(self):
        object.__setattr__(self, "etheta", wrap_angle(float(self.etheta)))
        if not (math.isfinite(self.ex) and math.isfinite(self.ey)):
            raise ValueError(f"non-finite egomotion ({self.ex}, {self.ey})")

    def as_pose(self) -> Pose:
        return Pose(self.ex, self.ey, self.etheta)

    def as_array(self) -> np.ndarray:
        return np.array([self.ex, self.ey, self.etheta])

    def within_step_bounds(self) -> bool:
        return abs(self.ex) <= 1.0 and abs(self.ey) <= 1.0 and abs(self.etheta) <= math.pi

    def to_dict(self) -> dict:
        return {"ex": self.ex, "ey": self.ey, "etheta": self.etheta}

    @classmethod
    def from_dict(cls, d: dict) -> "Egomotion":
        return cls(float(d["ex"]), float(d["ey"]), float(d["etheta"]))

    @classmethod
    def from_pose(cls, p: Pose) -> "Egomotion":
        return cls(p.x, p.y, p.theta)


@dataclass(frozen=True)
class GoalVector:
    gx: float
    gy: float

    def __post_init__(self):
        if not (math.isfinite(self.gx) and math.isfinite(self.gy)):
            raise ValueError(f"non-finite goal vector ({self.gx}, {self.gy})")

    @property
    def norm(self) -> float:
        return math.hypot(self.gx, self.gy)

    @property
    def bearing(self) -> float:
        return math.atan2(self.gy, self.gx)

    def to_dict(self) -> dict:
        return {"gx": self.gx, "gy": self.gy}

    @classmethod
    def from_dict(cls, d: dict) -> "GoalVector":
        return cls(float(d["gx"]), float(d["gy"]))


IDENTITY = Pose(0.0, 0.0, 0.0)


def compose(a: Pose, b_rel: Pose) -> Pose:
    """World pose of the frame ``b_rel`` expressed in ``a``'s local frame."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose(
        a.x + c * b_rel.x - s * b_rel.y,
        a.y + s * b_rel.x + c * b_rel.y,
        a.theta + b_rel.theta,
    )


def inverse(p: Pose) -> Pose:
    c, s = math.cos(p.theta), math.sin(p.theta)
    return Pose(-(c * p.x + s * p.y), -(-s * p.x + c * p.y), -p.theta)


def relative(a: Pose, b: Pose) -> Pose:
    """Pose of ``b`` in ``a``'s frame, i.e. ``compose(inverse(a), b)``."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    dx, dy = b.x - a.x, b.y - a.y
    return Pose(c * dx + s * dy, -s * dx + c * dy, b.theta - a.theta)


def apply_egomotion(p: Pose, e: Egomotion) -> Pose:
    return compose(p, e.as_pose())


def update_goal(g_prev: GoalVector, e_est: Egomotion) -> GoalVector:
    """Re-express the goal in the new agent frame after motion ``e_est``.

    The estimated translation is subtracted from the goal and the result is
    rotated by the inverse of the estimated yaw change.
    """
    dx = g_prev.gx - e_est.ex
    dy = g_prev.gy - e_est.ey
    c, s = math.cos(e_est.etheta), math.sin(e_est.etheta)
    return GoalVector(c * dx + s * dy, -s * dx + c * dy)


def goal_in_frame(pose: Pose, goal: tuple[float, float]) -> GoalVector:
    """Goal vector of a world point as seen from ``pose``."""
    rel = relative(pose, Pose(goal[0], goal[1], 0.0))
    return GoalVector(rel.x, rel.y)


def goal_to_world(pose: Pose, g: GoalVector) -> tuple[float, float]:
    w = compose(pose, Pose(g.gx, g.gy, 0.0))
    return (w.x, w.y)


def nominal_egomotion(action: Action) -> Egomotion:
    if action is Action.MOVE_FORWARD:
        return Egomotion(FORWARD_STEP, 0.0, 0.0)
    if action is Action.TURN_LEFT:
        return Egomotion(0.0, 0.0, TURN_ANGLE)
    if action is Action.TURN_RIGHT:
        return Egomotion(0.0, 0.0, -TURN_ANGLE)
    raise ValueError("STOP has no egomotion")
