import io
import json
import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from sklearn.base import clone

from realnav.agent import SensorParams, StepRecord, TrajectoryLog, World, initial_state, transition
from realnav.geometry import Action, Egomotion, Pose, apply_egomotion, compose, relative
from realnav.gridworld import DepthScan, OccupancyGrid, load_map, render_scan
from realnav.noise import ActuationNoiseConfig, SensorNoiseConfig
from realnav.odometry import (
    DeadReckonEstimator,
    GroundTruthEstimator,
    IcpEstimator,
    IcpError,
    IcpParams,
    NoisyOracleEstimator,
    TupleAugmenter,
    VOTuple,
    estimate,
    export_tuples,
    flip_tuple,
    icp_estimate,
    icp_match,
    make_estimator,
    scan_to_points,
    swap_tuple,
)
from realnav.planner import Episode

from conftest import box_map

FOV, RAYS, MAX_RANGE = math.pi / 2, 128, 10.0
PILLARS = [(r, c) for r0, c0 in ((12, 15), (30, 40), (40, 12), (18, 45)) for r in range(r0, r0 + 3) for c in range(c0, c0 + 3)]


@pytest.fixture(scope="module")
def cluttered():
    return load_map(box_map(60, 60, inner=PILLARS))


def scan(grid, pose):
    return render_scan(grid, pose, FOV, RAYS, MAX_RANGE)


def pair(grid, pose, e):
    return scan(grid, pose), scan(grid, apply_egomotion(pose, e))


def _scan(values):
    return DepthScan(1.0, len(values), 10.0, values)


def _tuple(e, action, n=4):
    a = _scan(np.linspace(1.0, 2.0, n))
    b = _scan(np.linspace(3.0, 4.0, n))
    return VOTuple(a, b, action, e)


# ---------------------------------------------------------------- kinds


def test_estimator_kinds(rng):
    gt = Egomotion(0.23, 0.01, -0.02)
    s = _scan([1.0] * 4)
    assert estimate("ground_truth", s, s, Action.MOVE_FORWARD, gt) is gt
    assert estimate("dead_reckon", s, s, Action.MOVE_FORWARD) == Egomotion(0.25, 0.0, 0.0)
    assert estimate("dead_reckon", s, s, Action.TURN_RIGHT) == Egomotion(0.0, 0.0, -math.pi / 6)
    assert estimate("noisy_oracle", s, s, Action.TURN_LEFT, gt, rng, sigma_t=0.0, sigma_r=0.0) == gt
    noisy = estimate("noisy_oracle", s, s, Action.TURN_LEFT, gt, rng, sigma_t=0.01, sigma_r=0.01)
    assert noisy != gt and abs(noisy.ex - gt.ex) < 0.06


def test_estimator_errors():
    s = _scan([1.0] * 4)
    with pytest.raises(ValueError):
        estimate("dead_reckon", s, s, Action.STOP)
    with pytest.raises(ValueError):
        estimate("ground_truth", s, s, Action.MOVE_FORWARD)
    with pytest.raises(ValueError):
        make_estimator("learned_cnn")
    with pytest.raises(ValueError):
        IcpParams(max_iterations=0)
    with pytest.raises(ValueError):
        IcpParams(convergence_eps_m=0.0)


def test_estimators_follow_sklearn_conventions():
    est = IcpEstimator(max_iterations=7)
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    assert twin.set_params(min_inliers=20).icp_params().min_inliers == 20
    assert NoisyOracleEstimator().fit() is not None


# ---------------------------------------------------------------- points


def test_scan_to_points_examples():
    assert scan_to_points(_scan([10.0, 10.0])).shape == (0, 2)
    pts = scan_to_points(DepthScan(0.0, 1, 10.0, [2.0]))
    assert np.allclose(pts, [[2.0, 0.0]])


@given(st.lists(st.floats(0.05, 10.0), min_size=1, max_size=40))
def test_scan_to_points_count(values):
    s = _scan(values)
    pts = scan_to_points(s)
    assert len(pts) == int((s.ranges < s.max_range).sum())
    assert np.allclose(np.hypot(*pts.T), s.ranges[s.ranges < s.max_range])


# ------------------------------------------------------------------- icp


def test_icp_identity(cluttered):
    s = scan(cluttered, Pose(2.5, 2.0, 0.7))
    e = icp_estimate(s, s, Egomotion(0.0, 0.0, 0.0))
    assert max(abs(v) for v in e.as_array()) <= 1e-9


@pytest.mark.parametrize("pose", [Pose(2.5, 2.0, 0.7), Pose(4.0, 4.5, -2.5), Pose(1.0, 3.0, 0.1)])
def test_icp_forward_step(cluttered, pose):
    e = icp_estimate(*pair(cluttered, pose, Egomotion(0.25, 0.0, 0.0)), Egomotion(0.25, 0.0, 0.0))
    assert abs(e.ex - 0.25) <= 1e-3 and abs(e.ey) <= 1e-3 and abs(e.etheta) <= 1e-3


@pytest.mark.parametrize("pose", [Pose(2.5, 2.0, 0.7), Pose(4.0, 4.5, -2.5), Pose(1.0, 3.0, 0.1)])
def test_icp_turn(cluttered, pose):
    turn = Egomotion(0.0, 0.0, math.pi / 6)
    e = icp_estimate(*pair(cluttered, pose, turn), turn)
    assert abs(e.ex) <= 1e-3 and abs(e.ey) <= 1e-3 and abs(e.etheta - math.pi / 6) <= 1e-3


def test_icp_recovers_perturbed_motion(cluttered):
    true = Egomotion(0.23, 0.012, 0.03)
    e = icp_estimate(*pair(cluttered, Pose(3.0, 2.0, 1.2), true), Egomotion(0.25, 0.0, 0.0))
    assert abs(e.ex - true.ex) < 0.01 and abs(e.ey - true.ey) < 0.01 and abs(e.etheta - true.etheta) < 0.01


def test_icp_point_to_point_mode(cluttered):
    s0, s1 = pair(cluttered, Pose(2.5, 2.0, 0.7), Egomotion(0.25, 0.0, 0.0))
    e = icp_estimate(s0, s1, Egomotion(0.25, 0.0, 0.0), IcpParams(metric="point_to_point"))
    assert abs(e.ex - 0.25) < 0.02 and abs(e.etheta) < 0.02


def test_icp_objective_never_increases(cluttered):
    rng = np.random.default_rng(5)
    for _ in range(20):
        pose = Pose(rng.uniform(1, 5), rng.uniform(1, 5), rng.uniform(-math.pi, math.pi))
        true = Egomotion(rng.uniform(0.2, 0.26), rng.uniform(-0.02, 0.02), rng.uniform(-0.05, 0.05))
        try:
            res = icp_match(*pair(cluttered, pose, true), Egomotion(0.25, 0.0, 0.0))
        except IcpError:
            continue
        assert all(b <= a for a, b in zip(res.residuals, res.residuals[1:]))


def test_icp_too_few_returns_raises_and_estimator_falls_back():
    empty = _scan([10.0] * 64)
    with pytest.raises(IcpError):
        icp_estimate(empty, empty, Egomotion(0.25, 0.0, 0.0))
    out = IcpEstimator().estimate_step(empty, empty, Action.MOVE_FORWARD)
    assert out.fallback and out.egomotion == Egomotion(0.25, 0.0, 0.0)


def test_icp_rejects_mismatched_sensors():
    with pytest.raises(ValueError):
        icp_estimate(_scan([1.0] * 4), _scan([1.0] * 5), Egomotion(0.0, 0.0, 0.0))


def test_flip_average_is_close_to_plain_estimate(cluttered):
    s0, s1 = pair(cluttered, Pose(2.5, 2.0, 0.7), Egomotion(0.25, 0.0, 0.0))
    a = IcpEstimator().estimate(s0, s1, Action.MOVE_FORWARD)
    b = IcpEstimator(flip_average=True).estimate(s0, s1, Action.MOVE_FORWARD)
    assert np.allclose(a.as_array(), b.as_array(), atol=2e-3)


# ------------------------------------------------------------ flip / swap


def test_flip_examples():
    t = _tuple(Egomotion(0.24, 0.01, 0.02), Action.MOVE_FORWARD)
    f = flip_tuple(t)
    assert f.egomotion_gt == Egomotion(0.24, -0.01, -0.02) and f.action is Action.MOVE_FORWARD
    assert f.scan_prev.ranges.tolist() == t.scan_prev.ranges[::-1].tolist()
    turn = flip_tuple(_tuple(Egomotion(0.0, 0.0, math.pi / 6), Action.TURN_LEFT))
    assert turn.egomotion_gt == Egomotion(0.0, 0.0, -math.pi / 6) and turn.action is Action.TURN_RIGHT


def _mirror_grid(grid: OccupancyGrid) -> OccupancyGrid:
    return OccupancyGrid(grid.cells[::-1].copy(), grid.cell_size)


def test_flip_matches_mirrored_world(cluttered):
    """Simulate the mirror image of the scene and compare with the flipped tuple."""
    h = cluttered.height * cluttered.cell_size
    mirror = _mirror_grid(cluttered)
    e = Egomotion(0.24, 0.01, 0.02)
    p0 = Pose(2.53, 2.07, 0.7)
    p1 = apply_egomotion(p0, e)
    flipped = flip_tuple(VOTuple(*pair(cluttered, p0, e), Action.MOVE_FORWARD, e))

    def m(p):
        return Pose(p.x, h - p.y, -p.theta)

    mirrored_e = Egomotion.from_pose(relative(m(p0), m(p1)))
    assert np.allclose(mirrored_e.as_array(), flipped.egomotion_gt.as_array(), atol=1e-12)
    assert np.allclose(scan(mirror, m(p0)).ranges, flipped.scan_prev.ranges, atol=1e-9)
    assert np.allclose(scan(mirror, m(p1)).ranges, flipped.scan_cur.ranges, atol=1e-9)


def test_swap_examples():
    t = _tuple(Egomotion(0.0, 0.0, math.pi / 6), Action.TURN_LEFT)
    s = swap_tuple(t)
    assert s.egomotion_gt.as_array() == pytest.approx([0.0, 0.0, -math.pi / 6], abs=1e-15)
    assert s.action is Action.TURN_RIGHT and s.scan_prev == t.scan_cur
    e = Egomotion(0.25, 0.02, 0.1)
    inv = swap_tuple(_tuple(e, Action.TURN_RIGHT)).egomotion_gt
    back = compose(e.as_pose(), inv.as_pose())
    assert max(abs(back.x), abs(back.y), abs(back.theta)) <= 1e-12


def test_swap_rejects_forward():
    t = _tuple(Egomotion(0.25, 0.0, 0.0), Action.MOVE_FORWARD)
    with pytest.raises(ValueError, match="no action label"):
        swap_tuple(t)
    assert swap_tuple(t, allow_forward=True).action is None


egomotions = st.builds(
    Egomotion, st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(-3.0, 3.0)
)


@given(egomotions, st.sampled_from([Action.TURN_LEFT, Action.TURN_RIGHT, Action.MOVE_FORWARD]))
def test_flip_is_an_involution(e, action):
    t = _tuple(e, action)
    assert flip_tuple(flip_tuple(t)) == t


@given(egomotions, st.sampled_from([Action.TURN_LEFT, Action.TURN_RIGHT]))
def test_swap_is_an_involution(e, action):
    t = _tuple(e, action)
    back = swap_tuple(swap_tuple(t))
    assert back.action is t.action and back.scan_prev == t.scan_prev and back.scan_cur == t.scan_cur
    assert np.allclose(back.egomotion_gt.as_array(), e.as_array(), atol=1e-12)


@given(st.lists(egomotions, min_size=1, max_size=20))
def test_flip_commutes_with_composition(seq):
    def flip(e):
        return Egomotion(e.ex, -e.ey, -e.etheta)

    total = Pose(0.0, 0.0, 0.0)
    flipped_total = Pose(0.0, 0.0, 0.0)
    for e in seq:
        total = compose(total, e.as_pose())
        flipped_total = compose(flipped_total, flip(e).as_pose())
    # at exactly pi the wrap picks +pi for both sides
    assume(abs(total.theta) < math.pi - 1e-9)
    expect = flip(Egomotion.from_pose(total))
    assert np.allclose(Egomotion.from_pose(flipped_total).as_array(), expect.as_array(), atol=1e-9)


def test_votuple_validation():
    with pytest.raises(ValueError):
        _tuple(Egomotion(0.0, 0.0, 0.0), Action.STOP)
    with pytest.raises(ValueError):
        _tuple(Egomotion(2.0, 0.0, 0.0), Action.MOVE_FORWARD)


# ------------------------------------------------------------------ export


def _single_step_log(grid, action):
    world = World(grid, sensor=SensorParams(FOV, 16, MAX_RANGE))
    ep = Episode("e", "m", Pose(3.0, 3.0, 0.0), (5.0, 3.0), 2.0, 2.0)
    state = initial_state(ep)
    tr = transition(world, state.pose_true, action, ActuationNoiseConfig(), SensorNoiseConfig.noiseless(), np.random.default_rng(0))
    rec = StepRecord(1, action, tr.egomotion, tr.egomotion, tr.pose, tr.pose, state.goal_est, scan=tr.scan)
    log = TrajectoryLog(ep, 0, "GroundTruthEstimator", "", world.sensor, state, world.observe(state.pose_true), [rec], "max_steps")
    return log


@pytest.mark.parametrize(
    "action, flip, swap, count",
    [
        (Action.MOVE_FORWARD, False, False, 1),
        (Action.TURN_LEFT, True, True, 4),
        (Action.MOVE_FORWARD, True, True, 2),
        (Action.TURN_RIGHT, False, True, 2),
    ],
)
def test_export_counts(open_room, action, flip, swap, count):
    log = _single_step_log(open_room, action)
    buf = io.StringIO()
    assert export_tuples([log], buf, flip=flip, swap=swap) == count
    records = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert len(records) == count
    assert set(records[0]) == {"episode_id", "step", "action", "ranges_prev", "ranges_cur", "ego", "augmentation"}
    assert records[0]["augmentation"] == "none"
    assert len({r["augmentation"] for r in records}) == count


def test_export_forward_unlabeled(open_room):
    log = _single_step_log(open_room, Action.MOVE_FORWARD)
    buf = io.StringIO()
    assert export_tuples([log], buf, flip=True, swap=True, swap_forward="unlabeled") == 4
    assert json.loads(buf.getvalue().splitlines()[2])["action"] is None


def test_export_is_deterministic(open_room, tmp_path):
    log = _single_step_log(open_room, Action.TURN_LEFT)
    export_tuples([log], tmp_path / "a.jsonl", flip=True, swap=True)
    export_tuples([log], tmp_path / "b.jsonl", flip=True, swap=True)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_export_surfaces_io_errors(open_room, tmp_path):
    log = _single_step_log(open_room, Action.TURN_LEFT)
    with pytest.raises(OSError, match="cannot write"):
        export_tuples([log], tmp_path / "missing" / "x.jsonl")


def test_tuple_augmenter_transform():
    ts = [_tuple(Egomotion(0.0, 0.0, 0.5), Action.TURN_LEFT), _tuple(Egomotion(0.25, 0.0, 0.0), Action.MOVE_FORWARD)]
    assert len(TupleAugmenter().fit_transform(ts)) == 6
    assert len(TupleAugmenter(flip=False).fit_transform(ts)) == 3


def test_estimator_score_on_tuples(cluttered):
    ts = [VOTuple(*pair(cluttered, Pose(2.5, 2.0, 0.7), Egomotion(0.25, 0.0, 0.0)), Action.MOVE_FORWARD, Egomotion(0.25, 0.0, 0.0))]
    assert GroundTruthEstimator().score(ts) == 0.0
    assert DeadReckonEstimator().score(ts) == 0.0
    assert IcpEstimator().predict(ts).shape == (1, 3)
