"""Navigation and odometry metrics.

SPL follows the usual success-weighted normalised-inverse-path-length
definition with the start geodesic distance as the shortest path length.
SoftSPL comes in two variants: ``"ratio"`` is the bare path-length ratio,
``"habitat"`` multiplies that ratio by SoftSuccess.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Action, Egomotion, wrap_angle
from .validation import check_increasing, check_positive

SUCCESS_DISTANCE = 0.36
DEFAULT_THRESHOLDS = (0.36, 0.395, 0.45, 0.70)
DEFAULT_BINS = (0.0, 3.0, 8.0, math.inf)
_GROUPS = {Action.MOVE_FORWARD: "forward", Action.TURN_LEFT: "left", Action.TURN_RIGHT: "right"}


def success(d_final: float, threshold: float = SUCCESS_DISTANCE) -> int:
    check_positive(threshold, "threshold")
    return int(d_final < threshold)


def path_length(poses) -> float:
    """Summed straight-line distance between consecutive positions."""
    pts = np.array([(p.x, p.y) if hasattr(p, "x") else tuple(p)[:2] for p in poses], dtype=float)
    if len(pts) < 2:
        return 0.0
    return float(np.hypot(*np.diff(pts, axis=0).T).sum())


def soft_success(d_final: float, geodesic_start: float) -> float:
    check_positive(geodesic_start, "geodesic_start")
    return min(1.0, max(0.0, 1.0 - d_final / geodesic_start))


def path_ratio(path: float, geodesic_start: float) -> float:
    check_positive(geodesic_start, "geodesic_start")
    return geodesic_start / max(path, geodesic_start)


def softspl(variant: str, d_final: float, geodesic_start: float, path: float) -> float:
    ratio = path_ratio(path, geodesic_start)
    if variant == "ratio":
        return ratio
    if variant == "habitat":
        return soft_success(d_final, geodesic_start) * ratio
    raise ValueError(f"unknown SoftSPL variant {variant!r}; use 'ratio' or 'habitat'")


@dataclass(frozen=True)
class EpisodeResult:
    success: int
    d_goal_final: float
    geodesic_start: float
    path_length: float
    steps: int
    termination: str = "stop"
    episode_id: str = ""

    def __post_init__(self):
        if self.path_length < 0 or self.d_goal_final < 0:
            raise ValueError("path_length and d_goal_final must be non-negative")

    def success_at(self, threshold: float) -> int:
        return success(self.d_goal_final, threshold) if self.termination == "stop" else 0


def spl(results: Sequence[EpisodeResult]) -> float:
    if not results:
        raise ValueError("spl of an empty episode set")
    return float(np.mean([r.success * path_ratio(r.path_length, r.geodesic_start) for r in results]))


@dataclass(frozen=True)
class MaeReport:
    """Translation MAE in cm and rotation MAE in centi-radians.

    Each dict has ``total``, ``forward``, ``left`` and ``right`` keys;
    groups without samples are None. ``counts`` has the sample counts.
    """

    translation: dict
    rotation: dict
    counts: dict


def mae(gt: Sequence[Egomotion], est: Sequence[Egomotion], actions: Sequence[Action]) -> MaeReport:
    """Per-sample translation error is |dx| + |dy| + |dz| with the planar
    mapping (x, y, z) = (left, vertical = 0, forward); rotation error is the
    wrapped absolute yaw difference."""
    if not (len(gt) == len(est) == len(actions)):
        raise ValueError(f"length mismatch: {len(gt)} gt, {len(est)} est, {len(actions)} actions")
    if len(gt) == 0:
        raise ValueError("mae needs at least one sample")
    trans = np.array([abs(g.ey - e.ey) + 0.0 + abs(g.ex - e.ex) for g, e in zip(gt, est)])
    rot = np.array([abs(wrap_angle(g.etheta - e.etheta)) for g, e in zip(gt, est)])
    groups = np.array([_GROUPS.get(Action(a), "other") if a is not None else "other" for a in actions])

    def summarise(values, scale):
        out = {"total": float(values.mean() * scale)}
        for name in ("forward", "left", "right"):
            sel = groups == name
            out[name] = float(values[sel].mean() * scale) if sel.any() else None
        return out

    counts = {"total": len(gt), **{n: int((groups == n).sum()) for n in ("forward", "left", "right")}}
    return MaeReport(summarise(trans, 100.0), summarise(rot, 100.0), counts)


def success_by_distance_bins(results: Sequence[EpisodeResult], edges=DEFAULT_BINS) -> list[dict]:
    """Success rate per ``[lo, hi)`` bin of start geodesic distance."""
    edges = check_increasing(edges, "bin edges")
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        members = [r for r in results if lo <= r.geodesic_start < hi]
        rate = float(np.mean([r.success for r in members])) if members else None
        out.append({"lo": float(lo), "hi": float(hi), "rate": rate, "count": len(members)})
    return out


@dataclass(frozen=True)
class MetricsReport:
    episodes: int
    success_rate: float
    spl: float
    soft_success_mean: float
    softspl_ratio_mean: float
    softspl_habitat_mean: float
    d_goal_mean: float
    success_at: dict = field(default_factory=dict)
    success_by_geo_bin: list = field(default_factory=list)
    mae: MaeReport | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(_finite(self.to_dict()), indent=2, sort_keys=True) + "\n"


def _finite(obj):
    # JSON has no infinity; open-ended bins are written as null
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def aggregate(
    results: Sequence[EpisodeResult],
    mae_inputs=None,
    thresholds=DEFAULT_THRESHOLDS,
    bins=DEFAULT_BINS,
) -> MetricsReport:
    """Every metric over the same episode set.

    ``mae_inputs`` is an optional ``(gt, est, actions)`` triple of per-step
    sequences.
    """
    if not results:
        raise ValueError("cannot aggregate an empty episode set")
    success_rate = float(np.mean([r.success for r in results]))
    spl_value = spl(results)
    assert spl_value <= success_rate + 1e-12
    report = MetricsReport(
        episodes=len(results),
        success_rate=success_rate,
        spl=spl_value,
        soft_success_mean=float(np.mean([soft_success(r.d_goal_final, r.geodesic_start) for r in results])),
        softspl_ratio_mean=float(
            np.mean([softspl("ratio", r.d_goal_final, r.geodesic_start, r.path_length) for r in results])
        ),
        softspl_habitat_mean=float(
            np.mean([softspl("habitat", r.d_goal_final, r.geodesic_start, r.path_length) for r in results])
        ),
        d_goal_mean=float(np.mean([r.d_goal_final for r in results])),
        success_at={f"{t:g}": float(np.mean([r.success_at(t) for r in results])) for t in thresholds},
        success_by_geo_bin=success_by_distance_bins(results, bins),
        mae=mae(*mae_inputs) if mae_inputs is not None and len(mae_inputs[0]) else None,
    )
    return report


def episode_result(log, threshold: float = SUCCESS_DISTANCE) -> EpisodeResult:
    """Score a trajectory log: success needs STOP inside the success zone."""
    final = log.final_pose
    gx, gy = log.episode.goal
    d = math.hypot(final.x - gx, final.y - gy)
    stopped = log.termination == "stop"
    return EpisodeResult(
        success=success(d, threshold) if stopped else 0,
        d_goal_final=d,
        geodesic_start=log.episode.geodesic_start,
        path_length=path_length(log.poses_true()),
        steps=sum(1 for r in log.records if r.action is not Action.STOP),
        termination=log.termination,
        episode_id=log.episode.id,
    )


def mae_inputs_from_logs(logs):
    gt, est, actions = [], [], []
    for log in logs:
        for r in log.records:
            if r.action is Action.STOP:
                continue
            gt.append(r.egomotion_true)
            est.append(r.egomotion_est)
            actions.append(r.action)
    return gt, est, actions


def evaluate_logs(logs, thresholds=DEFAULT_THRESHOLDS, bins=DEFAULT_BINS) -> MetricsReport:
    logs = list(logs)
    results = [episode_result(log) for log in logs]
    return aggregate(results, mae_inputs_from_logs(logs), thresholds, bins)
