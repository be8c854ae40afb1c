import json
import subprocess
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest

from realnav.agent import loads_log
from realnav.cli import ConfigError, tomllib, atomic_write, config_digest, load_config, main, parse_config, render_svg
from realnav.geometry import Pose
from realnav.planner import Episode

CONFIG = """\
map = "map.txt"
episodes = "episodes.jsonl"
seed = 7
output_dir = "out"
store_scans = true

[estimator]
kind = "dead_reckon"

[policy]
max_steps = 120
"""


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-map", "--width", "80", "--height", "60", "--rooms", "3", "--clutter", "1",
                 "--seed", "3", "--out", str(d / "map.txt")]) == 0
    assert main(["gen-episodes", "--map", str(d / "map.txt"), "--n", "5", "--seed", "1",
                 "--out", str(d / "episodes.jsonl")]) == 0
    (d / "run.toml").write_text(CONFIG)
    assert main(["run", "--config", str(d / "run.toml")]) == 0
    return d


def write_config(d: Path, name: str, text: str) -> Path:
    p = d / name
    p.write_text(text)
    return p


def test_run_outputs(ws):
    out = ws / "out"
    trajs = sorted((out / "trajectories").glob("*.jsonl"))
    assert len(trajs) == 5
    report = json.loads((out / "metrics.json").read_text())
    cfg = load_config(ws / "run.toml")
    assert report["config_digest"] == cfg.digest and report["seed"] == 7
    header = json.loads(trajs[0].read_text().splitlines()[0])
    assert header["type"] == "header" and header["config_digest"] == cfg.digest and header["seed"] == 7


def test_rerun_is_byte_identical(ws, tmp_path):
    a = ws / "out"
    assert main(["run", "--config", str(ws / "run.toml"), "--output-dir", str(tmp_path / "again"), "--workers", "2"]) == 0
    b = tmp_path / "again"
    for f in sorted(a.rglob("*.jsonl")) + [a / "metrics.json"]:
        assert (b / f.relative_to(a)).read_bytes() == f.read_bytes()


def test_json_config_equivalent_to_toml(ws):
    data = tomllib.loads(CONFIG)
    p = write_config(ws, "run.json", json.dumps(data))
    assert load_config(p).digest == load_config(ws / "run.toml").digest


def test_unknown_keys_rejected(ws, capsys):
    bad = write_config(ws, "bad.toml", CONFIG.replace('kind = "dead_reckon"', 'kind = "dead_reckon"\nbogus = 1'))
    assert main(["run", "--config", str(bad)]) == 2
    assert "bogus" in capsys.readouterr().err
    typo = write_config(ws, "typo.toml", CONFIG.replace("max_steps", "max_step"))
    assert main(["run", "--config", str(typo)]) == 2
    top = write_config(ws, "top.toml", "sede = 1\n" + CONFIG)
    assert main(["run", "--config", str(top)]) == 2


@pytest.mark.parametrize(
    "patch",
    [
        ('kind = "dead_reckon"', 'kind = "learned"'),
        ('map = "map.txt"', 'map = "missing.txt"'),
        ("max_steps = 120", "max_steps = 0"),
        ("store_scans = true", "store_scans = 1"),
        ("seed = 7", ""),
    ],
)
def test_invalid_configs_exit_2(ws, patch, monkeypatch):
    monkeypatch.delenv("NAV_SEED", raising=False)
    p = write_config(ws, "invalid.toml", CONFIG.replace(*patch))
    assert main(["run", "--config", str(p), "--output-dir", str(ws / "never")]) == 2
    assert not (ws / "never").exists()


def test_flip_average_requires_icp(ws):
    with pytest.raises(ConfigError):
        parse_config({"map": "map.txt", "episodes": "episodes.jsonl", "seed": 1, "flip_average": True}, ws, env={})


def test_seed_precedence(ws):
    base = {"map": "map.txt", "episodes": "episodes.jsonl", "seed": 1}
    assert parse_config(base, ws, env={}).seed == 1
    assert parse_config(base, ws, env={"NAV_SEED": "5"}).seed == 5
    assert parse_config(base, ws, seed_override=9, env={"NAV_SEED": "5"}).seed == 9
    with pytest.raises(ConfigError):
        parse_config(base, ws, env={"NAV_SEED": "x"})
    no_seed = {"map": "map.txt", "episodes": "episodes.jsonl"}
    assert parse_config(no_seed, ws, env={"NAV_SEED": "3"}).seed == 3
    with pytest.raises(ConfigError):
        parse_config(no_seed, ws, env={})


def test_nav_seed_changes_outputs(ws, tmp_path, monkeypatch):
    monkeypatch.setenv("NAV_SEED", "99")
    assert main(["run", "--config", str(ws / "run.toml"), "--output-dir", str(tmp_path / "s99")]) == 0
    report = json.loads((tmp_path / "s99" / "metrics.json").read_text())
    assert report["seed"] == 99
    assert report["config_digest"] != json.loads((ws / "out" / "metrics.json").read_text())["config_digest"]
    monkeypatch.setenv("NAV_SEED", "nope")
    assert main(["run", "--config", str(ws / "run.toml"), "--output-dir", str(tmp_path / "bad")]) == 2


def test_digest_ignores_workers_and_output(ws):
    a = load_config(ws / "run.toml")
    data = {"map": "map.txt", "episodes": "episodes.jsonl", "seed": 7, "output_dir": "elsewhere", "workers": 3,
            "store_scans": True, "estimator": {"kind": "dead_reckon"}, "policy": {"max_steps": 120}}
    assert parse_config(data, ws, env={}).digest == a.digest
    assert config_digest({"a": 1}) == config_digest({"a": 1}) != config_digest({"a": 2})


def test_metrics_command(ws, tmp_path):
    out = tmp_path / "m.json"
    assert main(["metrics", "--traj-dir", str(ws / "out" / "trajectories"), "--thresholds", "0.36,0.7",
                 "--bins", "0,5,inf", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert set(rep["success_at"]) == {"0.36", "0.7"}
    assert len(rep["success_by_geo_bin"]) == 2 and rep["episodes"] == 5
    assert main(["metrics", "--traj-dir", str(ws / "out" / "trajectories"), "--bins", "5,1", "--out", str(out)]) == 2


def test_export_vo(ws, tmp_path):
    out = tmp_path / "vo.jsonl"
    assert main(["export-vo", "--traj-dir", str(ws / "out" / "trajectories"), "--flip", "--swap", "--out", str(out)]) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert rows and {r["augmentation"] for r in rows} <= {"none", "flip", "swap", "flip_swap"}
    forward_swaps = [r for r in rows if r["augmentation"] == "swap" and r["action"] is None]
    assert not forward_swaps


def test_export_vo_needs_scans(ws, tmp_path):
    cfg = write_config(ws, "noscan.toml", CONFIG.replace("store_scans = true", "store_scans = false"))
    assert main(["run", "--config", str(cfg), "--output-dir", str(tmp_path / "ns")]) == 0
    assert main(["export-vo", "--traj-dir", str(tmp_path / "ns" / "trajectories"), "--out", str(tmp_path / "x")]) == 2
    assert not (tmp_path / "x").exists()


def test_ceiling_deterministic(ws, tmp_path):
    args = ["ceiling", "--map", str(ws / "map.txt"), "--episodes", str(ws / "episodes.jsonl"), "--trials", "1", "--seed", "4"]
    assert main(args + ["--out", str(tmp_path / "a.json")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    rep = json.loads((tmp_path / "a.json").read_text())
    assert 0.0 <= rep["spl"] <= 1.0 and rep["episodes"] == 5
    assert main(args[:-2] + ["--trials", "0", "--out", str(tmp_path / "c.json")]) == 2
    assert not (tmp_path / "c.json").exists()


def test_ceiling_zero_noise_succeeds(ws, tmp_path):
    out = tmp_path / "z.json"
    assert main(["ceiling", "--map", str(ws / "map.txt"), "--episodes", str(ws / "episodes.jsonl"),
                 "--trials", "1", "--zero-noise", "--seed", "0", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["success"] == 1.0


def test_runtime_errors_exit_3(ws, tmp_path, monkeypatch):
    import realnav.cli as cli

    def boom(*a, **k):
        raise RuntimeError("simulated failure")

    monkeypatch.setattr(cli, "run_from_config", boom)
    assert main(["run", "--config", str(ws / "run.toml"), "--output-dir", str(tmp_path / "boom")]) == 3


def test_bad_arguments_exit_2():
    assert main(["gen-map"]) == 2
    assert main(["no-such-command"]) == 2
    assert main(["gen-map", "--rooms", "50", "--width", "20", "--height", "20", "--out", "/tmp/never.txt"]) == 2


def test_console_script_exit_code(ws):
    proc = subprocess.run([sys.executable, "-m", "realnav", "render", "--trajectory", "x", "--map", "nope.txt", "--out", "y"],
                          capture_output=True, text=True)
    assert proc.returncode == 2


# ------------------------------------------------------------------ render


def test_render_command_is_deterministic(ws, tmp_path):
    traj = sorted((ws / "out" / "trajectories").glob("*.jsonl"))[0]
    for name in ("a.svg", "b.svg"):
        assert main(["render", "--trajectory", str(traj), "--map", str(ws / "map.txt"), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    ET.fromstring((tmp_path / "a.svg").read_text())
    assert main(["render", "--trajectory", str(traj), "--map", str(tmp_path / "missing.txt"), "--out", str(tmp_path / "c.svg")]) == 2


def _polyline_vertices(svg: str, cls: str):
    root = ET.fromstring(svg)
    return [el for el in root.iter() if el.get("class") == cls]


def test_render_estimated_differs_from_true(ws):
    from realnav.cli import read_map

    grid = read_map(ws / "map.txt")
    traj = max((ws / "out" / "trajectories").glob("*.jsonl"), key=lambda p: len(p.read_text()))
    lg = loads_log(traj.read_text())
    svg = render_svg(lg, grid)
    est = _polyline_vertices(svg, "estimated")
    assert len(est) == 1
    est_pts = est[0].get("points").split()
    assert len(est_pts) == len(lg.poses_est())
    # dead reckoning under noise drifts, so the two vertex sets differ
    assert {tuple(map(float, p.split(","))) for p in est_pts} != {
        (round(p.x * 40, 2), round(p.y * 40, 2)) for p in lg.poses_true()
    }


def test_render_empty_trajectory(open_room):
    from realnav.agent import World, run_episode

    ep = Episode("here", "room", Pose(3.0, 3.0, 0.0), (3.1, 3.0), 0.1, 0.1)
    lg = run_episode(World(open_room), ep, "ground_truth")
    assert [r.action.value for r in lg.records] == ["STOP"]
    root = ET.fromstring(render_svg(lg, open_room))
    classes = {el.get("class") for el in root.iter()}
    assert {"start", "goal"} <= classes


def test_atomic_write_leaves_no_temp_files(tmp_path):
    target = tmp_path / "sub" / "f.txt"
    atomic_write(target, "one")
    atomic_write(target, b"two")
    assert target.read_text() == "two"
    assert [p.name for p in target.parent.iterdir()] == ["f.txt"]
