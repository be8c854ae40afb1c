"""Egomotion estimators, scan matching, and flip/swap label transforms.

Every estimator fills the same slot in the navigation loop: given the
previous and current scans plus the action taken, return the pose change
from the previous agent frame to the current one. Estimators follow the
scikit-learn estimator conventions (constructor-only hyper-parameters,
``get_params``/``set_params``, ``fit`` returning ``self``) so they can be
cloned, grid-searched over and scored on exported VO tuples.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator

from .geometry import Action, Egomotion, Pose, inverse, nominal_egomotion, wrap_angle
from .gridworld import DepthScan
from .noise import median_filter
from .validation import check_int, check_positive


class IcpError(RuntimeError):
    """Scan matching could not find enough correspondences."""


@dataclass(frozen=True)
class VOTuple:
    scan_prev: DepthScan
    scan_cur: DepthScan
    action: Action | None  # None only for unlabeled (time-reversed forward) tuples
    egomotion_gt: Egomotion

    def __post_init__(self):
        if self.action is Action.STOP:
            raise ValueError("VO tuples cannot carry the STOP action")
        if not self.egomotion_gt.within_step_bounds():
            raise ValueError(f"egomotion {self.egomotion_gt} outside single-step bounds")


def flip_tuple(t: VOTuple) -> VOTuple:
    """Mirror a tuple about the agent's forward axis."""
    e = t.egomotion_gt
    return VOTuple(
        t.scan_prev.with_ranges(t.scan_prev.ranges[::-1]),
        t.scan_cur.with_ranges(t.scan_cur.ranges[::-1]),
        None if t.action is None else t.action.mirrored(),
        Egomotion(e.ex, -e.ey, -e.etheta),
    )


def swap_tuple(t: VOTuple, *, allow_forward: bool = False) -> VOTuple:
    """Time-reverse a tuple: exchange the scans and invert the egomotion.

    A reversed forward step has no label in the action space, so forward
    tuples are rejected unless ``allow_forward`` is set, in which case the
    result carries no action.
    """
    if t.action is Action.MOVE_FORWARD or t.action is None:
        if not allow_forward:
            raise ValueError(
                "swap is only defined for turn actions: a time-reversed MOVE_FORWARD "
                "has no action label (pass allow_forward=True to export it unlabeled)"
            )
        action = None
    else:
        action = t.action.mirrored()
    inv = inverse(t.egomotion_gt.as_pose())
    return VOTuple(t.scan_cur, t.scan_prev, action, Egomotion.from_pose(inv))


# ------------------------------------------------------------- scan matching


@dataclass(frozen=True)
class IcpParams:
    """Scan-matching settings.

    ``metric`` selects the alignment step: ``"point_to_line"`` (default)
    solves a linearised point-to-segment least-squares problem regularised
    towards the initial guess with ``prior_sigma_*`` (along-track,
    cross-track, yaw); ``"point_to_point"``
    uses the closed-form cross-covariance alignment against the same
    projected correspondences.
    """

    max_iterations: int = 30
    convergence_eps_m: float = 1e-6
    convergence_eps_rad: float = 1e-6
    max_correspondence_dist: float = 0.3
    min_inliers: int = 10
    max_segment: float = 0.3
    trim_factor: float = 3.0
    trim_floor: float = 1e-3
    metric: str = "point_to_line"
    point_sigma: float = 0.05
    prior_sigma_m: float = 0.03
    prior_sigma_cross_m: float = 0.012
    prior_sigma_rad: float = 0.03

    def __post_init__(self):
        check_int(self.max_iterations, "max_iterations", minimum=1)
        check_positive(self.convergence_eps_m, "convergence_eps_m")
        check_positive(self.convergence_eps_rad, "convergence_eps_rad")
        check_positive(self.max_correspondence_dist, "max_correspondence_dist")
        check_int(self.min_inliers, "min_inliers", minimum=1)
        check_positive(self.max_segment, "max_segment")
        check_positive(self.trim_factor, "trim_factor")
        check_positive(self.trim_floor, "trim_floor")
        check_positive(self.point_sigma, "point_sigma")
        check_positive(self.prior_sigma_m, "prior_sigma_m")
        check_positive(self.prior_sigma_cross_m, "prior_sigma_cross_m")
        check_positive(self.prior_sigma_rad, "prior_sigma_rad")
        if self.metric not in ("point_to_line", "point_to_point"):
            raise ValueError(f"unknown ICP metric {self.metric!r}")


def scan_to_points(scan: DepthScan) -> np.ndarray:
    """Agent-frame hit points, one per ray that returned before max range."""
    return _scan_points(scan)[0]


def _scan_points(scan: DepthScan):
    keep = scan.ranges < scan.max_range
    r = scan.ranges[keep]
    b = scan.bearings()[keep]
    pts = np.column_stack([r * np.cos(b), r * np.sin(b)])
    return pts, np.flatnonzero(keep)


class _LineModel:
    """Target model: local line fits along the previous scan.

    Hit points are chained in ray order; consecutive rays are linked only if
    both returned and the gap is below ``max_segment``, so depth
    discontinuities do not create phantom surfaces. Every vertex gets a
    least-squares line through its chain neighbours (``half_window`` on each
    side). Vertices with too few neighbours are unusable.
    """

    def __init__(self, points: np.ndarray, ray_index: np.ndarray, max_segment: float, half_window: int = 3):
        self.points = points
        self.tree = cKDTree(points)
        n = len(points)
        gaps = np.hypot(*np.diff(points, axis=0).T) if n > 1 else np.zeros(0)
        link = (np.diff(ray_index) == 1) & (gaps <= max_segment)
        # chain id per vertex: increments wherever a link is missing
        chain = np.concatenate([[0], np.cumsum(~link)])
        offsets = np.arange(-half_window, half_window + 1)
        nb = np.clip(np.arange(n)[:, None] + offsets, 0, max(n - 1, 0))
        member = (chain[nb] == chain[:, None]) & (np.abs(nb - np.arange(n)[:, None]) == np.abs(offsets))
        count = member.sum(axis=1)
        w = member / np.maximum(count, 1)[:, None]
        xs, ys = points[nb, 0], points[nb, 1]
        cx, cy = (w * xs).sum(axis=1), (w * ys).sum(axis=1)
        dx, dy = xs - cx[:, None], ys - cy[:, None]
        sxx, syy, sxy = (w * dx * dx).sum(axis=1), (w * dy * dy).sum(axis=1), (w * dx * dy).sum(axis=1)
        # principal direction of the 2x2 scatter; the normal is perpendicular
        phi = 0.5 * np.arctan2(2 * sxy, sxx - syy)
        centroid = np.column_stack([cx, cy])
        normal = np.column_stack([-np.sin(phi), np.cos(phi)])
        valid = count >= 3
        self.centroid, self.normal, self.valid = centroid, normal, valid

    def closest(self, q: np.ndarray):
        """Foot point on the nearest vertex's line, its normal, distances.

        Returns ``(foot, normal, line_dist, vertex_dist, usable)``.
        """
        vertex_dist, idx = self.tree.query(q)
        n = self.normal[idx]
        r = np.einsum("ij,ij->i", q - self.centroid[idx], n)
        foot = q - r[:, None] * n
        return foot, n, np.abs(r), vertex_dist, self.valid[idx]


def align_points(source: np.ndarray, target: np.ndarray):
    """Closed-form least-squares rigid transform mapping source onto target.

    Returns ``(R, t)`` from the 2x2 cross-covariance of the centred sets.
    """
    ms, mt = source.mean(axis=0), target.mean(axis=0)
    h = (source - ms).T @ (target - mt)
    theta = math.atan2(h[0, 1] - h[1, 0], h[0, 0] + h[1, 1])
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    return rot, mt - rot @ ms


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


class IcpResult(NamedTuple):
    egomotion: Egomotion
    iterations: int
    residuals: list  # objective after each accepted iteration
    inliers: int


class _Matcher:
    def __init__(self, model: _LineModel, source: np.ndarray, params: IcpParams, prior: np.ndarray):
        self.model = model
        self.source = source
        self.params = params
        self.prior = prior
        self.prior_w = np.array([params.prior_sigma_m, params.prior_sigma_cross_m, params.prior_sigma_rad]) ** -2.0

    def correspond(self, x: np.ndarray):
        p = self.params
        moved = self.source @ _rotation(x[2]).T + x[:2]
        match, normal, dist, vertex_dist, usable = self.model.closest(moved)
        keep = usable & (vertex_dist <= p.max_correspondence_dist)
        if keep.any():
            # drop matches far worse than typical: corner chords, occlusion edges
            cutoff = max(p.trim_factor * float(np.median(dist[keep])), p.trim_floor)
            keep &= dist <= cutoff
        return moved[keep], match[keep], normal[keep]

    def cost(self, x: np.ndarray, moved, match, normal) -> float:
        if self.params.metric == "point_to_line":
            r = np.einsum("ij,ij->i", normal, moved - match)
            data = float(np.mean(r * r))
        else:
            data = float(np.mean(np.sum((moved - match) ** 2, axis=1)))
        dx = x - self.prior
        dx[2] = wrap_angle(dx[2])
        return data + self.params.point_sigma**2 * float(dx @ (self.prior_w * dx)) / len(moved)

    def step(self, x, moved, match, normal) -> np.ndarray:
        if self.params.metric == "point_to_point":
            rot, trans = align_points(moved, match)
            return np.array([*(rot @ x[:2] + trans), x[2] + math.atan2(rot[1, 0], rot[0, 0])])
        rel = moved - x[:2]
        jac = np.column_stack([normal[:, 0], normal[:, 1], normal[:, 1] * rel[:, 0] - normal[:, 0] * rel[:, 1]])
        r = np.einsum("ij,ij->i", normal, moved - match)
        w = self.params.point_sigma**-2.0
        dx = x - self.prior
        dx[2] = wrap_angle(dx[2])
        lhs = w * jac.T @ jac + np.diag(self.prior_w)
        rhs = -(w * jac.T @ r + self.prior_w * dx)
        return x + np.linalg.solve(lhs, rhs)


def icp_match(scan_prev: DepthScan, scan_cur: DepthScan, init: Egomotion, params: IcpParams | None = None) -> IcpResult:
    """Align the current scan onto the previous one starting from ``init``.

    Each iteration re-matches current-scan points to the local line fit at
    the nearest previous-scan point, trims outliers, and takes an alignment
    step. A step is accepted only if it lowers the objective (halving it up
    to four times otherwise), so the recorded residuals never increase.
    """
    params = params or IcpParams()
    if (scan_prev.fov, scan_prev.n_rays) != (scan_cur.fov, scan_cur.n_rays):
        raise ValueError("scans come from different sensor geometries")
    target_pts, target_idx = _scan_points(scan_prev)
    source = scan_to_points(scan_cur)
    if len(target_pts) < params.min_inliers or len(source) < params.min_inliers:
        raise IcpError(f"too few returns ({len(target_pts)}, {len(source)}) for matching")
    x = init.as_array()
    matcher = _Matcher(_LineModel(target_pts, target_idx, params.max_segment), source, params, x.copy())

    def evaluate(x):
        moved, match, normal = matcher.correspond(x)
        if len(moved) < params.min_inliers:
            raise IcpError(f"only {len(moved)} correspondences (need {params.min_inliers})")
        return matcher.cost(x, moved, match, normal), (moved, match, normal)

    cost, corr = evaluate(x)
    residuals = [cost]
    it = 0
    for it in range(1, params.max_iterations + 1):
        proposal = matcher.step(x, *corr)
        accepted = False
        for _ in range(5):
            try:
                new_cost, new_corr = evaluate(proposal)
            except IcpError:
                new_cost = math.inf
            if new_cost <= cost:
                accepted = True
                break
            proposal = (x + proposal) / 2
        if not accepted:
            break
        delta = proposal - x
        x, cost, corr = proposal, new_cost, new_corr
        residuals.append(cost)
        if math.hypot(delta[0], delta[1]) < params.convergence_eps_m and abs(delta[2]) < params.convergence_eps_rad:
            break
    e = Egomotion(float(x[0]), float(x[1]), float(x[2]))
    if not e.within_step_bounds():
        raise IcpError(f"scan matching diverged to {e}")
    return IcpResult(e, it, residuals, len(corr[0]))


def icp_estimate(scan_prev: DepthScan, scan_cur: DepthScan, init: Egomotion, params: IcpParams | None = None) -> Egomotion:
    """Egomotion taking current-frame coordinates into the previous frame."""
    return icp_match(scan_prev, scan_cur, init, params).egomotion


# ---------------------------------------------------------------- estimators


class Estimate(NamedTuple):
    egomotion: Egomotion
    fallback: bool = False


def _check_action(action) -> Action:
    action = Action(action)
    if action is Action.STOP:
        raise ValueError("STOP has no egomotion to estimate")
    return action


class EgomotionEstimator(BaseEstimator):
    """Base class; subclasses implement :meth:`estimate_step`."""

    requires_scans = False
    requires_gt = False

    def fit(self, X=None, y=None):
        return self

    def estimate_step(self, scan_prev, scan_cur, action, gt=None, rng=None) -> Estimate:
        raise NotImplementedError

    def estimate(self, scan_prev, scan_cur, action, gt=None, rng=None) -> Egomotion:
        return self.estimate_step(scan_prev, scan_cur, action, gt, rng).egomotion

    def predict(self, tuples: Sequence[VOTuple]) -> np.ndarray:
        """``(n, 3)`` array of ``(ex, ey, etheta)`` for each VO tuple."""
        rng = np.random.default_rng(getattr(self, "random_state", None))
        out = np.empty((len(tuples), 3))
        for i, t in enumerate(tuples):
            out[i] = self.estimate(t.scan_prev, t.scan_cur, t.action, t.egomotion_gt, rng).as_array()
        return out

    def score(self, tuples: Sequence[VOTuple], y=None) -> float:
        """Negative total MAE (translation cm + rotation centi-radians)."""
        from .metrics import mae

        pred = [Egomotion(*row) for row in self.predict(tuples)]
        report = mae([t.egomotion_gt for t in tuples], pred, [t.action for t in tuples])
        return -(report.translation["total"] + report.rotation["total"])


class GroundTruthEstimator(EgomotionEstimator):
    requires_gt = True

    def estimate_step(self, scan_prev, scan_cur, action, gt=None, rng=None) -> Estimate:
        _check_action(action)
        if gt is None:
            raise ValueError("ground_truth estimator needs the true egomotion")
        return Estimate(gt)


class DeadReckonEstimator(EgomotionEstimator):
    def estimate_step(self, scan_prev, scan_cur, action, gt=None, rng=None) -> Estimate:
        return Estimate(nominal_egomotion(_check_action(action)))


class NoisyOracleEstimator(EgomotionEstimator):
    """True egomotion plus isotropic Gaussian error."""

    requires_gt = True

    def __init__(self, sigma_t: float = 0.01, sigma_r: float = 0.005, random_state=None):
        self.sigma_t = sigma_t
        self.sigma_r = sigma_r
        self.random_state = random_state

    def estimate_step(self, scan_prev, scan_cur, action, gt=None, rng=None) -> Estimate:
        _check_action(action)
        if gt is None:
            raise ValueError("noisy_oracle estimator needs the true egomotion")
        check_positive(self.sigma_t, "sigma_t", allow_zero=True)
        check_positive(self.sigma_r, "sigma_r", allow_zero=True)
        if self.sigma_t == 0 and self.sigma_r == 0:
            return Estimate(gt)
        if rng is None:
            rng = np.random.default_rng(self.random_state)
        n = rng.standard_normal(3)
        return Estimate(
            Egomotion(gt.ex + self.sigma_t * n[0], gt.ey + self.sigma_t * n[1], gt.etheta + self.sigma_r * n[2])
        )


class IcpEstimator(EgomotionEstimator):
    """Scan-matching odometry initialised at the action's nominal motion.

    Both scans are median-filtered first. When matching fails the nominal
    motion is returned and the step is flagged as a fallback.
    """

    requires_scans = True

    def __init__(
        self,
        max_iterations: int = 30,
        convergence_eps_m: float = 1e-6,
        convergence_eps_rad: float = 1e-6,
        max_correspondence_dist: float = 0.3,
        min_inliers: int = 10,
        max_segment: float = 0.3,
        trim_factor: float = 3.0,
        trim_floor: float = 1e-3,
        metric: str = "point_to_line",
        point_sigma: float = 0.05,
        prior_sigma_m: float = 0.03,
        prior_sigma_cross_m: float = 0.012,
        prior_sigma_rad: float = 0.03,
        median_window: int = 3,
        flip_average: bool = False,
    ):
        self.max_iterations = max_iterations
        self.convergence_eps_m = convergence_eps_m
        self.convergence_eps_rad = convergence_eps_rad
        self.max_correspondence_dist = max_correspondence_dist
        self.min_inliers = min_inliers
        self.max_segment = max_segment
        self.trim_factor = trim_factor
        self.trim_floor = trim_floor
        self.metric = metric
        self.point_sigma = point_sigma
        self.prior_sigma_m = prior_sigma_m
        self.prior_sigma_cross_m = prior_sigma_cross_m
        self.prior_sigma_rad = prior_sigma_rad
        self.median_window = median_window
        self.flip_average = flip_average

    def icp_params(self) -> IcpParams:
        names = IcpParams.__dataclass_fields__
        return IcpParams(**{k: v for k, v in self.get_params().items() if k in names})

    def _match(self, scan_prev, scan_cur, action: Action, params) -> Egomotion:
        if self.median_window > 1:
            scan_prev = median_filter(scan_prev, self.median_window)
            scan_cur = median_filter(scan_cur, self.median_window)
        return icp_estimate(scan_prev, scan_cur, nominal_egomotion(action), params)

    def estimate_step(self, scan_prev, scan_cur, action, gt=None, rng=None) -> Estimate:
        action = _check_action(action)
        if scan_prev is None or scan_cur is None:
            raise ValueError("icp estimator needs both scans")
        params = self.icp_params()
        try:
            e = self._match(scan_prev, scan_cur, action, params)
            if self.flip_average:
                mp = scan_prev.with_ranges(scan_prev.ranges[::-1])
                mc = scan_cur.with_ranges(scan_cur.ranges[::-1])
                m = self._match(mp, mc, action.mirrored(), params)
                e = Egomotion(
                    (e.ex + m.ex) / 2,
                    (e.ey - m.ey) / 2,
                    e.etheta + wrap_angle(-m.etheta - e.etheta) / 2,
                )
        except IcpError:
            return Estimate(nominal_egomotion(action), fallback=True)
        return Estimate(e)


ESTIMATORS = {
    "ground_truth": GroundTruthEstimator,
    "dead_reckon": DeadReckonEstimator,
    "noisy_oracle": NoisyOracleEstimator,
    "icp": IcpEstimator,
}


def make_estimator(kind: str, **params) -> EgomotionEstimator:
    try:
        cls = ESTIMATORS[kind]
    except KeyError:
        raise ValueError(f"unknown estimator kind {kind!r}; expected one of {sorted(ESTIMATORS)}") from None
    return cls(**params)


def estimate(kind, scan_prev, scan_cur, action, gt_egomotion=None, rng=None, **params) -> Egomotion:
    est = kind if isinstance(kind, EgomotionEstimator) else make_estimator(kind, **params)
    return est.estimate(scan_prev, scan_cur, action, gt_egomotion, rng)


# ------------------------------------------------------------------- export

AUGMENTATIONS = ("none", "flip", "swap", "flip_swap")


def tuple_record(episode_id, step: int, t: VOTuple, augmentation: str) -> dict:
    return {
        "episode_id": episode_id,
        "step": step,
        "action": None if t.action is None else t.action.value,
        "ranges_prev": t.scan_prev.ranges.tolist(),
        "ranges_cur": t.scan_cur.ranges.tolist(),
        "ego": t.egomotion_gt.to_dict(),
        "augmentation": augmentation,
    }


def augment(t: VOTuple, *, flip: bool, swap: bool, swap_forward: str = "skip") -> list[tuple[str, VOTuple]]:
    """Original tuple plus its enabled augmentations, in a fixed order."""
    if swap_forward not in ("skip", "unlabeled"):
        raise ValueError("swap_forward must be 'skip' or 'unlabeled'")
    out = [("none", t)]
    if flip:
        out.append(("flip", flip_tuple(t)))
    can_swap = t.action in (Action.TURN_LEFT, Action.TURN_RIGHT) or swap_forward == "unlabeled"
    if swap and can_swap:
        swapped = swap_tuple(t, allow_forward=True)
        out.append(("swap", swapped))
        if flip:
            out.append(("flip_swap", flip_tuple(swapped)))
    return out


def iter_log_tuples(log) -> Iterable[tuple[int, VOTuple]]:
    """(step, tuple) pairs from a trajectory log that stored its scans."""
    prev = log.initial_scan
    if prev is None:
        raise ValueError(f"trajectory {log.episode_id} has no stored scans")
    for rec in log.records:
        if rec.action is Action.STOP:
            continue
        if rec.scan is None:
            raise ValueError(f"trajectory {log.episode_id} step {rec.step} has no stored scan")
        yield rec.step, VOTuple(prev, rec.scan, rec.action, rec.egomotion_true)
        prev = rec.scan


def export_tuples(logs, sink, *, flip: bool = False, swap: bool = False, swap_forward: str = "skip") -> int:
    """Stream VO training tuples as JSON lines; returns the record count.

    ``sink`` is a path or a writable text stream.
    """
    if hasattr(sink, "write"):
        return _write_tuples(logs, sink, flip, swap, swap_forward)
    try:
        with open(sink, "w", encoding="utf-8") as fh:
            return _write_tuples(logs, fh, flip, swap, swap_forward)
    except OSError as exc:
        raise OSError(f"cannot write VO tuples to {sink}: {exc}") from exc


def _write_tuples(logs, fh, flip, swap, swap_forward) -> int:
    count = 0
    for log in logs:
        for step, t in iter_log_tuples(log):
            for name, variant in augment(t, flip=flip, swap=swap, swap_forward=swap_forward):
                fh.write(json.dumps(tuple_record(log.episode_id, step, variant, name)) + "\n")
                count += 1
    return count


class TupleAugmenter(BaseEstimator):
    """Transformer expanding a list of VO tuples with flip/swap variants."""

    def __init__(self, flip: bool = True, swap: bool = True, swap_forward: str = "skip"):
        self.flip = flip
        self.swap = swap
        self.swap_forward = swap_forward

    def fit(self, X=None, y=None):
        return self

    def transform(self, X: Sequence[VOTuple]) -> list[VOTuple]:
        out = []
        for t in X:
            out.extend(v for _, v in augment(t, flip=self.flip, swap=self.swap, swap_forward=self.swap_forward))
        return out

    def fit_transform(self, X, y=None):
        return self.fit(X, y).transform(X)


__all__ = [
    "Estimate", "EgomotionEstimator", "GroundTruthEstimator", "DeadReckonEstimator",
    "NoisyOracleEstimator", "IcpEstimator", "IcpError", "IcpParams", "IcpResult", "VOTuple",
    "align_points", "augment", "estimate", "export_tuples", "flip_tuple", "icp_estimate",
    "icp_match", "make_estimator", "scan_to_points", "swap_tuple", "TupleAugmenter",
]
