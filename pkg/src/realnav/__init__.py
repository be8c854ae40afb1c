"""Noisy, GPS-free PointGoal navigation on 2D occupancy grids.

The agent integrates estimated egomotion into its goal vector, so swapping
the egomotion estimator is the only thing that changes between agents.
"""

from .agent import PolicyParams, SensorParams, TrajectoryLog, World, decide, run_episode, step
from .geometry import (
    Action,
    Egomotion,
    GoalVector,
    Pose,
    apply_egomotion,
    compose,
    inverse,
    update_goal,
    wrap_angle,
)
from .gridworld import (
    DepthScan,
    OccupancyGrid,
    generate_map,
    is_navigable,
    load_map,
    move_with_collision,
    raycast,
    render_scan,
)
from .metrics import MaeReport, MetricsReport, aggregate, evaluate_logs, mae, soft_success, softspl, spl, success
from .noise import ActuationNoiseConfig, SensorNoiseConfig, derive_rng, median_filter
from .odometry import IcpEstimator, TupleAugmenter, flip_tuple, make_estimator, swap_tuple
from .planner import Episode, distance_field, generate_episodes, shortest_path

__version__ = "0.1.0"

__all__ = [
    "Action", "ActuationNoiseConfig", "DepthScan", "Egomotion", "Episode", "GoalVector",
    "IcpEstimator", "MaeReport", "MetricsReport", "OccupancyGrid", "PolicyParams", "Pose",
    "SensorNoiseConfig", "SensorParams", "TrajectoryLog", "TupleAugmenter", "World", "aggregate",
    "apply_egomotion", "compose", "decide", "evaluate_logs", "derive_rng", "distance_field", "flip_tuple",
    "generate_episodes", "generate_map", "inverse", "is_navigable", "load_map", "mae",
    "make_estimator", "median_filter", "move_with_collision", "raycast", "render_scan",
    "run_episode", "shortest_path", "soft_success", "softspl", "spl", "step", "success",
    "swap_tuple", "update_goal", "wrap_angle",
]
