"""The navigation loop: act, move under noise, observe, estimate egomotion,
update the goal estimate, decide again.

The policy is a replanning shortest-path follower. It plans on the known
map but only ever knows where it is through the egomotion estimator, so
localization quality is the single thing that varies between agents.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .geometry import (
    FORWARD_STEP,
    TURN_ANGLE,
    Action,
    Egomotion,
    GoalVector,
    Pose,
    apply_egomotion,
    goal_in_frame,
    relative,
    update_goal,
    wrap_angle,
)
from .gridworld import (
    DEFAULT_RADIUS,
    DepthScan,
    OccupancyGrid,
    free_distance,
    move_with_collision,
    render_scan,
)
from .noise import ActuationNoiseConfig, SensorNoiseConfig, corrupt_scan, derive_rng, sample_actuation
from .odometry import EgomotionEstimator, make_estimator
from .planner import DistanceField, Episode, PlanningError, descend, distance_field
from .validation import check_int, check_positive


@dataclass(frozen=True)
class SensorParams:
    fov: float = math.pi / 2
    n_rays: int = 128
    max_range: float = 10.0

    def __post_init__(self):
        check_positive(self.fov, "fov", allow_zero=True)
        check_int(self.n_rays, "n_rays", minimum=1)
        check_positive(self.max_range, "max_range")


@dataclass(frozen=True)
class World:
    grid: OccupancyGrid
    radius: float = DEFAULT_RADIUS
    sensor: SensorParams = field(default_factory=SensorParams)

    def observe(self, pose: Pose) -> DepthScan:
        s = self.sensor
        return render_scan(self.grid, pose, s.fov, s.n_rays, s.max_range)


@dataclass(frozen=True)
class PolicyParams:
    stop_distance: float = 0.36
    turn_threshold: float = math.pi / 12
    max_steps: int = 500
    waypoint_lookahead: float = 1.0
    # extra clearance the follower keeps from walls when planning
    clearance_margin: float = 0.05

    def __post_init__(self):
        check_positive(self.stop_distance, "stop_distance")
        check_positive(self.turn_threshold, "turn_threshold")
        check_int(self.max_steps, "max_steps", minimum=1)
        check_positive(self.waypoint_lookahead, "waypoint_lookahead")
        check_positive(self.clearance_margin, "clearance_margin", allow_zero=True)


@dataclass(frozen=True)
class AgentState:
    pose_true: Pose
    pose_est: Pose
    goal_est: GoalVector
    step_count: int = 0
    collided_last: bool = False


@dataclass(frozen=True)
class StepRecord:
    step: int
    action: Action
    egomotion_true: Egomotion | None
    egomotion_est: Egomotion | None
    pose_true: Pose
    pose_est: Pose
    goal_est: GoalVector
    collided: bool = False
    fallback: bool = False
    scan: DepthScan | None = None


@dataclass
class TrajectoryLog:
    episode: Episode
    seed: int
    estimator: str
    config_digest: str
    sensor: SensorParams
    initial: AgentState
    initial_scan: DepthScan | None = None
    records: list[StepRecord] = field(default_factory=list)
    termination: str = ""

    @property
    def episode_id(self) -> str:
        return self.episode.id

    def poses_true(self) -> list[Pose]:
        return [self.initial.pose_true] + [r.pose_true for r in self.records]

    def poses_est(self) -> list[Pose]:
        return [self.initial.pose_est] + [r.pose_est for r in self.records]

    @property
    def final_pose(self) -> Pose:
        return self.records[-1].pose_true if self.records else self.initial.pose_true


def initial_state(episode: Episode) -> AgentState:
    """Start state: the goal estimate is exact and the start pose is known."""
    return AgentState(episode.start, episode.start, goal_in_frame(episode.start, episode.goal))


# ------------------------------------------------------------------ policy

MIN_WAYPOINT = 0.2


def _line_of_sight(free: np.ndarray, grid: OccupancyGrid, a, b) -> bool:
    length = math.hypot(b[0] - a[0], b[1] - a[1])
    n = max(2, int(math.ceil(length / (grid.cell_size * 0.25))) + 1)
    for s in np.linspace(0.0, 1.0, n):
        r, c = grid.cell_of(a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1]))
        if not (grid.in_bounds(r, c) and free[r, c]):
            return False
    return True


def _entry_cell(field: DistanceField, x: float, y: float):
    grid = field.grid
    row, col = grid.cell_of(x, y)
    if field.reachable(row, col):
        return row, col
    best, best_d = None, math.inf
    for dr in range(-2, 3):
        for dc in range(-2, 3):
            r, c = row + dr, col + dc
            if field.reachable(r, c):
                cx, cy = grid.cell_center(r, c)
                d = math.hypot(cx - x, cy - y)
                if d < best_d:
                    best, best_d = (r, c), d
    return best


def lookahead_waypoint(field: DistanceField, position, lookahead: float, body_radius: float | None = None):
    """Farthest visible point on the descent path within ``lookahead``.

    The first path point at least ``MIN_WAYPOINT`` away is always taken so
    that the bearing is well defined; later points must be visible through
    cells that are free for a disc of ``body_radius``. Returns None when the
    position cannot be attached to the field.
    """
    grid = field.grid
    x, y = float(position[0]), float(position[1])
    cell = _entry_cell(field, x, y)
    if cell is None:
        return None
    free = grid.clearance_mask(body_radius) if body_radius is not None else np.isfinite(field.distance)
    target = grid.cell_center(*cell)
    committed = math.hypot(target[0] - x, target[1] - y) >= MIN_WAYPOINT
    while True:
        cell = descend(field, *cell)
        if cell is None:
            return target
        nxt = grid.cell_center(*cell)
        d = math.hypot(nxt[0] - x, nxt[1] - y)
        if not committed:
            target = nxt
            committed = d >= MIN_WAYPOINT
            continue
        if d > lookahead or not _line_of_sight(free, grid, (x, y), nxt):
            return target
        target = nxt


def _step_is_clear(grid: OccupancyGrid, pose: Pose, heading: float, radius: float) -> bool:
    return free_distance(grid, pose.x, pose.y, heading, radius, FORWARD_STEP + 0.05) >= FORWARD_STEP


def decide(
    state: AgentState,
    field: DistanceField | None = None,
    params: PolicyParams | None = None,
    body_radius: float | None = None,
) -> Action:
    """STOP inside the estimated success zone, otherwise turn toward or step
    to the next waypoint (the goal estimate itself when there is no map).

    With a map and a body radius, the follower only steps forward when the
    known map says the step is clear. Otherwise it turns toward the nearest
    reachable heading on the 30 degree lattice around its current one. The
    rule is memoryless, so a blocked agent cannot dither between two turns.
    """
    params = params or PolicyParams()
    goal = state.goal_est
    if goal.norm < params.stop_distance:
        return Action.STOP
    bearing = goal.bearing
    pose = state.pose_est
    if field is not None:
        wp = lookahead_waypoint(field, pose.position, params.waypoint_lookahead, body_radius)
        if wp is not None:
            local = relative(pose, Pose(wp[0], wp[1], 0.0))
            if math.hypot(local.x, local.y) > 1e-9:
                bearing = math.atan2(local.y, local.x)
    if field is None or body_radius is None:
        if abs(bearing) > params.turn_threshold:
            return Action.TURN_LEFT if bearing > 0 else Action.TURN_RIGHT
        return Action.MOVE_FORWARD

    grid = field.grid
    if abs(bearing) <= params.turn_threshold and _step_is_clear(grid, pose, pose.theta, body_radius):
        return Action.MOVE_FORWARD
    turns = sorted(range(-5, 7), key=lambda k: (abs(wrap_angle(bearing - k * TURN_ANGLE)), abs(k)))
    for k in turns:
        if _step_is_clear(grid, pose, pose.theta + k * TURN_ANGLE, body_radius):
            if k == 0:
                return Action.MOVE_FORWARD
            if k == 6:
                return Action.TURN_LEFT if bearing > 0 else Action.TURN_RIGHT
            return Action.TURN_LEFT if k > 0 else Action.TURN_RIGHT
    return Action.TURN_LEFT if bearing > 0 else Action.TURN_RIGHT


# -------------------------------------------------------------------- loop


@dataclass(frozen=True)
class Transition:
    pose: Pose
    egomotion: Egomotion
    collided: bool
    scan: DepthScan | None


def transition(
    world: World,
    pose: Pose,
    action: Action,
    actuation: ActuationNoiseConfig,
    sensor_noise: SensorNoiseConfig,
    rng_actuation: np.random.Generator,
    rng_sensor: np.random.Generator | None = None,
    observe: bool = True,
) -> Transition:
    """Physical effect of one action.

    The sampled translation is pushed through the no-sliding collision check
    along its own direction; the sampled rotation is applied as is. The
    returned egomotion is the realised one.
    """
    e = sample_actuation(action, actuation, rng_actuation)
    dist = math.hypot(e.ex, e.ey)
    scale, collided = 1.0, False
    if dist > 0.0:
        heading = Pose(pose.x, pose.y, pose.theta + math.atan2(e.ey, e.ex))
        moved, collided = move_with_collision(world.grid, heading, dist, world.radius)
        if collided:
            scale = math.hypot(moved.x - pose.x, moved.y - pose.y) / dist
    realized = Egomotion(scale * e.ex, scale * e.ey, e.etheta) if collided else e
    new_pose = apply_egomotion(pose, realized)
    scan = None
    if observe:
        scan = world.observe(new_pose)
        if rng_sensor is not None:
            scan = corrupt_scan(scan, sensor_noise, rng_sensor)
    return Transition(new_pose, realized, collided, scan)


def step(
    world: World,
    state: AgentState,
    action: Action,
    actuation: ActuationNoiseConfig,
    sensor_noise: SensorNoiseConfig,
    rng: np.random.Generator,
    rng_sensor: np.random.Generator | None = None,
) -> tuple[AgentState, Transition]:
    """Advance the true state only; estimation happens in :func:`run_episode`."""
    if action is Action.STOP:
        raise ValueError("STOP ends the episode and has no transition")
    tr = transition(world, state.pose_true, action, actuation, sensor_noise, rng, rng_sensor or rng)
    new_state = replace(state, pose_true=tr.pose, step_count=state.step_count + 1, collided_last=tr.collided)
    return new_state, tr


def policy_field(world: World, goal, params: PolicyParams) -> DistanceField | None:
    """Distance field the follower plans on, with extra wall clearance if possible."""
    for radius in (world.radius + params.clearance_margin, world.radius):
        try:
            return distance_field(world.grid, goal, radius)
        except PlanningError:
            continue
    return None


def run_episode(
    world: World,
    episode: Episode,
    estimator: EgomotionEstimator | str = "ground_truth",
    actuation: ActuationNoiseConfig | None = None,
    sensor_noise: SensorNoiseConfig | None = None,
    params: PolicyParams | None = None,
    seed: int = 0,
    *,
    field: DistanceField | None = None,
    use_map: bool = True,
    store_scans: bool = False,
    config_digest: str = "",
) -> TrajectoryLog:
    """Run one episode to STOP or ``max_steps``; a pure function of its inputs."""
    if isinstance(estimator, str):
        estimator = make_estimator(estimator)
    actuation = actuation if actuation is not None else ActuationNoiseConfig()
    sensor_noise = sensor_noise if sensor_noise is not None else SensorNoiseConfig()
    params = params or PolicyParams()
    if use_map and field is None:
        field = policy_field(world, episode.goal, params)
    if not use_map:
        field = None

    rng_act = derive_rng(seed, episode.id, "actuation")
    rng_sensor = derive_rng(seed, episode.id, "sensor")
    rng_est = derive_rng(seed, episode.id, "estimator")
    observe = store_scans or estimator.requires_scans

    state = initial_state(episode)
    scan = None
    if observe:
        scan = corrupt_scan(world.observe(state.pose_true), sensor_noise, rng_sensor)
    log = TrajectoryLog(
        episode=episode,
        seed=seed,
        estimator=type(estimator).__name__,
        config_digest=config_digest,
        sensor=world.sensor,
        initial=state,
        initial_scan=scan if store_scans else None,
    )

    while True:
        action = decide(state, field, params, world.radius)
        if action is Action.STOP:
            log.records.append(
                StepRecord(state.step_count + 1, Action.STOP, None, None, state.pose_true, state.pose_est, state.goal_est)
            )
            log.termination = "stop"
            return log
        if state.step_count >= params.max_steps:
            log.termination = "max_steps"
            return log
        tr = transition(world, state.pose_true, action, actuation, sensor_noise, rng_act, rng_sensor, observe)
        est = estimator.estimate_step(scan, tr.scan, action, tr.egomotion, rng_est)
        state = AgentState(
            pose_true=tr.pose,
            pose_est=apply_egomotion(state.pose_est, est.egomotion),
            goal_est=update_goal(state.goal_est, est.egomotion),
            step_count=state.step_count + 1,
            collided_last=tr.collided,
        )
        log.records.append(
            StepRecord(
                state.step_count,
                action,
                tr.egomotion,
                est.egomotion,
                state.pose_true,
                state.pose_est,
                state.goal_est,
                tr.collided,
                est.fallback,
                tr.scan if store_scans else None,
            )
        )
        scan = tr.scan


# ----------------------------------------------------------------- JSONL IO


def _scan_list(scan: DepthScan | None):
    return None if scan is None else scan.ranges.tolist()


def log_to_records(log: TrajectoryLog) -> Iterator[dict]:
    s = log.initial
    yield {
        "type": "header",
        "episode": log.episode.to_dict(),
        "seed": log.seed,
        "estimator": log.estimator,
        "config_digest": log.config_digest,
        "sensor": {"fov": log.sensor.fov, "n_rays": log.sensor.n_rays, "max_range": log.sensor.max_range},
        "pose_true": s.pose_true.to_dict(),
        "pose_est": s.pose_est.to_dict(),
        "goal_est": s.goal_est.to_dict(),
        "scan": _scan_list(log.initial_scan),
    }
    for r in log.records:
        yield {
            "type": "step",
            "step": r.step,
            "action": r.action.value,
            "egomotion_true": None if r.egomotion_true is None else r.egomotion_true.to_dict(),
            "egomotion_est": None if r.egomotion_est is None else r.egomotion_est.to_dict(),
            "pose_true": r.pose_true.to_dict(),
            "pose_est": r.pose_est.to_dict(),
            "goal_est": r.goal_est.to_dict(),
            "collided": r.collided,
            "fallback": r.fallback,
            "scan": _scan_list(r.scan),
        }
    yield {"type": "end", "termination": log.termination, "steps": len(log.records)}


def dumps_log(log: TrajectoryLog) -> str:
    return "".join(json.dumps(rec) + "\n" for rec in log_to_records(log))


def loads_log(text: str) -> TrajectoryLog:
    records = [json.loads(line) for line in text.splitlines() if line.strip()]
    if not records or records[0].get("type") != "header":
        raise ValueError("trajectory log must start with a header record")
    h = records[0]
    sensor = SensorParams(float(h["sensor"]["fov"]), int(h["sensor"]["n_rays"]), float(h["sensor"]["max_range"]))

    def scan(ranges):
        if ranges is None:
            return None
        return DepthScan(sensor.fov, sensor.n_rays, sensor.max_range, ranges)

    def ego(d):
        return None if d is None else Egomotion.from_dict(d)

    log = TrajectoryLog(
        episode=Episode.from_dict(h["episode"]),
        seed=int(h["seed"]),
        estimator=h["estimator"],
        config_digest=h["config_digest"],
        sensor=sensor,
        initial=AgentState(Pose.from_dict(h["pose_true"]), Pose.from_dict(h["pose_est"]), GoalVector.from_dict(h["goal_est"])),
        initial_scan=scan(h.get("scan")),
    )
    for rec in records[1:]:
        if rec["type"] == "step":
            log.records.append(
                StepRecord(
                    int(rec["step"]),
                    Action(rec["action"]),
                    ego(rec["egomotion_true"]),
                    ego(rec["egomotion_est"]),
                    Pose.from_dict(rec["pose_true"]),
                    Pose.from_dict(rec["pose_est"]),
                    GoalVector.from_dict(rec["goal_est"]),
                    bool(rec["collided"]),
                    bool(rec.get("fallback", False)),
                    scan(rec.get("scan")),
                )
            )
        elif rec["type"] == "end":
            log.termination = rec["termination"]
    return log
