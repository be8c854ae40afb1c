"""Command-line entry points, run configuration, batch orchestration, the
SPL-ceiling experiment and SVG top-down rendering.

Exit status is 0 on success, 2 for invalid configuration or input, and 3
for failures while running. ``NAV_SEED`` overrides the configured seed; an
explicit ``--seed`` flag overrides both.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .agent import PolicyParams, SensorParams, TrajectoryLog, World, dumps_log, loads_log, run_episode
from .gridworld import DEFAULT_RADIUS, GenerationError, OccupancyGrid, dump_map, generate_map, load_map
from .metrics import DEFAULT_BINS, DEFAULT_THRESHOLDS, MetricsReport, episode_result, evaluate_logs
from .noise import ActuationNoiseConfig, SensorNoiseConfig
from .odometry import ESTIMATORS, export_tuples, make_estimator
from .planner import Episode, EpisodeConstraints, generate_episodes, load_episodes, polyline_length

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("realnav")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(ValueError):
    """Invalid configuration or input; maps to exit status 2."""


# ------------------------------------------------------------------ config


def _check_keys(section: str, data: dict, allowed) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"[{section}] must be a table")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def _dataclass_from(cls, section: str, data: dict | None):
    data = dict(data or {})
    _check_keys(section, data, [f.name for f in fields(cls)])
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


@dataclass(frozen=True)
class EstimatorConfig:
    kind: str = "ground_truth"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RunConfig:
    map: str
    episodes: str
    seed: int
    output_dir: str = "out"
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    actuation: ActuationNoiseConfig = field(default_factory=ActuationNoiseConfig)
    sensor_noise: SensorNoiseConfig = field(default_factory=SensorNoiseConfig)
    sensor: SensorParams = field(default_factory=SensorParams)
    policy: PolicyParams = field(default_factory=PolicyParams)
    radius: float = DEFAULT_RADIUS
    store_scans: bool = False
    flip_average: bool = False
    workers: int = 1
    thresholds: tuple = DEFAULT_THRESHOLDS
    bins: tuple = DEFAULT_BINS
    base_dir: str = "."

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def estimator_params(self) -> dict:
        params = dict(self.estimator.params)
        if self.flip_average:
            if self.estimator.kind != "icp":
                raise ConfigError("flip_average is only defined for the icp estimator")
            params["flip_average"] = True
        return params

    def to_dict(self) -> dict:
        """Effective configuration; hashed into every output header."""
        return {
            "map": self.map,
            "episodes": self.episodes,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "estimator": {"kind": self.estimator.kind, "params": dict(sorted(self.estimator.params.items()))},
            "actuation": self.actuation.to_dict(),
            "sensor_noise": self.sensor_noise.to_dict(),
            "sensor": vars(self.sensor).copy(),
            "policy": vars(self.policy).copy(),
            "radius": self.radius,
            "store_scans": self.store_scans,
            "flip_average": self.flip_average,
            "workers": self.workers,
            "metrics": {"thresholds": list(self.thresholds), "bins": [_json_float(b) for b in self.bins]},
        }

    @property
    def digest(self) -> str:
        d = self.to_dict()
        # worker count and output location do not change results
        d.pop("workers")
        d.pop("output_dir")
        return config_digest(d)


_TOP_KEYS = {
    "map", "episodes", "seed", "output_dir", "estimator", "actuation", "sensor_noise", "sensor",
    "policy", "radius", "store_scans", "flip_average", "workers", "metrics",
}


def _json_float(x):
    return None if isinstance(x, float) and math.isinf(x) else x


def config_digest(data) -> str:
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(raw.decode("utf-8"))
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a table/object at top level")
    return data


def parse_config(data: dict, base_dir=".", seed_override: int | None = None, env=None) -> RunConfig:
    """Validate a raw config mapping; unknown keys anywhere are rejected."""
    env = os.environ if env is None else env
    _check_keys("top level", data, _TOP_KEYS)
    for key in ("map", "episodes"):
        if not isinstance(data.get(key), str):
            raise ConfigError(f"'{key}' must be given as a path string")
    seed = _resolve_seed(data.get("seed"), seed_override, env)

    est = dict(data.get("estimator") or {})
    _check_keys("estimator", est, ("kind", "params"))
    kind = est.get("kind", "ground_truth")
    if kind not in ESTIMATORS:
        raise ConfigError(f"unknown estimator kind {kind!r}; expected one of {sorted(ESTIMATORS)}")
    params = dict(est.get("params") or {})
    try:
        est_obj = make_estimator(kind, **params)
        if hasattr(est_obj, "icp_params"):
            est_obj.icp_params()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[estimator.params]: {exc}") from exc

    try:
        actuation = ActuationNoiseConfig.from_dict(data.get("actuation"))
        sensor_noise = SensorNoiseConfig.from_dict(data.get("sensor_noise"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    metrics = dict(data.get("metrics") or {})
    _check_keys("metrics", metrics, ("thresholds", "bins"))
    thresholds = tuple(float(t) for t in metrics.get("thresholds", DEFAULT_THRESHOLDS))
    bins = tuple(math.inf if b is None else float(b) for b in metrics.get("bins", DEFAULT_BINS))
    if any(t <= 0 for t in thresholds):
        raise ConfigError("success thresholds must be positive")
    if len(bins) < 2 or any(b <= a for a, b in zip(bins, bins[1:])):
        raise ConfigError("bin edges must be strictly increasing")

    workers = data.get("workers", 1)
    if not isinstance(workers, int) or isinstance(workers, bool) or workers < 1:
        raise ConfigError("workers must be a positive integer")
    radius = data.get("radius", DEFAULT_RADIUS)
    if not isinstance(radius, (int, float)) or radius <= 0:
        raise ConfigError("radius must be a positive number")

    cfg = RunConfig(
        map=data["map"],
        episodes=data["episodes"],
        seed=seed,
        output_dir=str(data.get("output_dir", "out")),
        estimator=EstimatorConfig(kind, params),
        actuation=actuation,
        sensor_noise=sensor_noise,
        sensor=_dataclass_from(SensorParams, "sensor", data.get("sensor")),
        policy=_dataclass_from(PolicyParams, "policy", data.get("policy")),
        radius=float(radius),
        store_scans=_flag(data, "store_scans"),
        flip_average=_flag(data, "flip_average"),
        workers=workers,
        thresholds=thresholds,
        bins=bins,
        base_dir=str(base_dir),
    )
    cfg.estimator_params()
    for key in ("map", "episodes"):
        if not cfg.resolve(getattr(cfg, key)).is_file():
            raise ConfigError(f"{key} file not found: {cfg.resolve(getattr(cfg, key))}")
    return cfg


def _flag(data: dict, key: str) -> bool:
    value = data.get(key, False)
    if not isinstance(value, bool):
        raise ConfigError(f"'{key}' must be true or false")
    return value


def _resolve_seed(config_seed, flag_seed, env) -> int:
    if flag_seed is not None:
        return int(flag_seed)
    if env.get("NAV_SEED"):
        try:
            return int(env["NAV_SEED"])
        except ValueError:
            raise ConfigError(f"NAV_SEED must be an integer, got {env['NAV_SEED']!r}") from None
    if config_seed is None:
        raise ConfigError("a seed is required (config 'seed', NAV_SEED or --seed)")
    if not isinstance(config_seed, int) or isinstance(config_seed, bool):
        raise ConfigError("seed must be an integer")
    return config_seed


def load_config(path, seed_override: int | None = None, env=None) -> RunConfig:
    path = Path(path)
    return parse_config(read_config_file(path), path.parent, seed_override, env)


# --------------------------------------------------------------- file I/O


def atomic_write(path, data: str | bytes) -> None:
    """Write via a temporary file in the same directory and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_map(path) -> OccupancyGrid:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read map {path}: {exc}") from exc
    try:
        return load_map(text)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def read_episodes(path) -> list[Episode]:
    try:
        return load_episodes(path)
    except OSError as exc:
        raise ConfigError(f"cannot read episodes {path}: {exc}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: malformed episode record ({exc})") from exc


def read_trajectories(directory) -> list[TrajectoryLog]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"trajectory directory not found: {directory}")
    files = sorted(directory.glob("*.jsonl"))
    if not files:
        raise ConfigError(f"no trajectory files in {directory}")
    logs = []
    for f in files:
        try:
            logs.append(loads_log(f.read_text(encoding="utf-8")))
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"{f}: malformed trajectory log ({exc})") from exc
    return logs


# ----------------------------------------------------------- batch running


def _run_one(args):
    world, episode, kind, est_params, actuation, sensor_noise, policy, seed, store_scans, digest = args
    return run_episode(
        world,
        episode,
        make_estimator(kind, **est_params),
        actuation,
        sensor_noise,
        policy,
        seed,
        store_scans=store_scans,
        config_digest=digest,
    )


def run_batch(
    world: World,
    episodes: Sequence[Episode],
    kind: str = "ground_truth",
    estimator_params: dict | None = None,
    actuation: ActuationNoiseConfig | None = None,
    sensor_noise: SensorNoiseConfig | None = None,
    policy: PolicyParams | None = None,
    seed: int = 0,
    *,
    store_scans: bool = False,
    config_digest: str = "",
    workers: int = 1,
) -> list[TrajectoryLog]:
    """Run every episode; the result order and contents do not depend on ``workers``."""
    jobs = [
        (world, ep, kind, dict(estimator_params or {}), actuation, sensor_noise, policy, seed, store_scans, config_digest)
        for ep in episodes
    ]
    if workers <= 1 or len(jobs) <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def run_from_config(cfg: RunConfig) -> tuple[list[TrajectoryLog], MetricsReport]:
    grid = read_map(cfg.resolve(cfg.map))
    episodes = read_episodes(cfg.resolve(cfg.episodes))
    world = World(grid, cfg.radius, cfg.sensor)
    logs = run_batch(
        world,
        episodes,
        cfg.estimator.kind,
        cfg.estimator_params(),
        cfg.actuation,
        cfg.sensor_noise,
        cfg.policy,
        cfg.seed,
        store_scans=cfg.store_scans,
        config_digest=cfg.digest,
        workers=cfg.workers,
    )
    return logs, evaluate_logs(logs, cfg.thresholds, cfg.bins)


# ---------------------------------------------------------------- ceiling


@dataclass(frozen=True)
class CeilingReport:
    noise_digest: str
    episodes: int
    trials: int
    seed: int
    spl: float
    success: float
    per_bin_spl: list

    def __post_init__(self):
        if not 0.0 <= self.spl <= 1.0:
            raise ValueError(f"spl {self.spl} outside [0, 1]")

    def to_json(self) -> str:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["per_bin_spl"] = [
            {**b, "lo": _json_float(b["lo"]), "hi": _json_float(b["hi"])} for b in self.per_bin_spl
        ]
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def run_ceiling(
    worlds: Sequence[tuple[World, Sequence[Episode]]],
    actuation: ActuationNoiseConfig,
    trials: int = 3,
    seed: int = 0,
    policy: PolicyParams | None = None,
    bins=DEFAULT_BINS,
    workers: int = 1,
) -> CeilingReport:
    """Oracle follower with ground-truth localization under actuation noise.

    Each trial of an episode draws its noise from a stream keyed by the
    episode id and trial index, so trials are independent and reproducible.
    Sensor noise is irrelevant here because nothing reads the scans.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    results = []
    for world, episodes in worlds:
        expanded = [replace(ep, id=f"{ep.id}#trial{k}") for ep in episodes for k in range(trials)]
        logs = run_batch(
            world, expanded, "ground_truth", None, actuation, SensorNoiseConfig.noiseless(), policy, seed,
            workers=workers,
        )
        results.extend(episode_result(lg) for lg in logs)
    if not results:
        raise ConfigError("ceiling experiment needs at least one episode")
    per_episode_spl = [r.success * r.geodesic_start / max(r.path_length, r.geodesic_start) for r in results]
    per_bin = []
    for lo, hi in zip(bins[:-1], bins[1:]):
        sel = [s for s, r in zip(per_episode_spl, results) if lo <= r.geodesic_start < hi]
        per_bin.append({"lo": float(lo), "hi": float(hi), "spl": float(np.mean(sel)) if sel else None, "count": len(sel)})
    return CeilingReport(
        noise_digest=config_digest(actuation.to_dict()),
        episodes=len(results) // trials,
        trials=trials,
        seed=seed,
        spl=float(np.mean(per_episode_spl)),
        success=float(np.mean([r.success for r in results])),
        per_bin_spl=per_bin,
    )


# ---------------------------------------------------------------- render

_TRUE_DARK = (8, 48, 107)
_TRUE_LIGHT = (158, 202, 225)
_EST_COLOR = "#d95f02"


def _mix(a, b, t: float) -> str:
    return "#{:02x}{:02x}{:02x}".format(*(round(x + (y - x) * t) for x, y in zip(a, b)))


def render_svg(log: TrajectoryLog, grid: OccupancyGrid, px_per_m: float = 40.0, success_radius: float = 0.36) -> str:
    """Top-down SVG: occupied cells, start/goal markers, success zone, the
    true trajectory shaded dark to light over time and the estimated
    trajectory in a second hue. Output bytes depend only on the inputs."""
    w_m, h_m = grid.extent
    ox, oy = grid.origin
    width, height = w_m * px_per_m, h_m * px_per_m

    def sx(x):
        return f"{(x - ox) * px_per_m:.2f}"

    def sy(y):
        return f"{height - (y - oy) * px_per_m:.2f}"

    cs = grid.cell_size * px_per_m
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.2f} {height:.2f}">',
        f'<rect x="0" y="0" width="{width:.2f}" height="{height:.2f}" fill="#ffffff"/>',
        '<g fill="#4d4d4d" stroke="none">',
    ]
    # one rectangle per horizontal run of occupied cells
    for row in range(grid.height):
        line = grid.cells[row]
        col = 0
        while col < grid.width:
            if not line[col]:
                col += 1
                continue
            start = col
            while col < grid.width and line[col]:
                col += 1
            x = ox + start * grid.cell_size
            y = oy + (row + 1) * grid.cell_size
            out.append(f'<rect x="{sx(x)}" y="{sy(y)}" width="{(col - start) * cs:.2f}" height="{cs:.2f}"/>')
    out.append("</g>")

    gx, gy = log.episode.goal
    out.append(
        f'<circle cx="{sx(gx)}" cy="{sy(gy)}" r="{success_radius * px_per_m:.2f}" '
        'fill="#d62728" fill-opacity="0.15" stroke="#d62728" stroke-width="1"/>'
    )

    true_pts = [(p.x, p.y) for p in log.poses_true()]
    n = len(true_pts) - 1
    out.append('<g stroke-width="2" stroke-linecap="round" fill="none">')
    for i in range(n):
        (x0, y0), (x1, y1) = true_pts[i], true_pts[i + 1]
        if (x0, y0) == (x1, y1):
            continue
        color = _mix(_TRUE_DARK, _TRUE_LIGHT, i / max(1, n - 1))
        out.append(f'<line x1="{sx(x0)}" y1="{sy(y0)}" x2="{sx(x1)}" y2="{sy(y1)}" stroke="{color}"/>')
    out.append("</g>")

    est_pts = [(p.x, p.y) for p in log.poses_est()]
    if polyline_length(est_pts) > 0:
        coords = " ".join(f"{sx(x)},{sy(y)}" for x, y in est_pts)
        out.append(
            f'<polyline class="estimated" points="{coords}" fill="none" stroke="{_EST_COLOR}" '
            'stroke-width="1.5" stroke-dasharray="4 3"/>'
        )

    s = log.episode.start
    out.append(f'<circle class="start" cx="{sx(s.x)}" cy="{sy(s.y)}" r="5" fill="#2ca02c"/>')
    arm = 5.0
    gxs, gys = float(sx(gx)), float(sy(gy))
    out.append(
        f'<path class="goal" d="M{gxs - arm:.2f},{gys - arm:.2f} L{gxs + arm:.2f},{gys + arm:.2f} '
        f'M{gxs - arm:.2f},{gys + arm:.2f} L{gxs + arm:.2f},{gys - arm:.2f}" stroke="#d62728" stroke-width="2"/>'
    )
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ------------------------------------------------------------------ commands


def cmd_gen_map(args) -> int:
    seed = _resolve_seed(0, args.seed, os.environ)
    try:
        grid = generate_map(args.width, args.height, args.cell_size, args.rooms, seed, clutter=args.clutter)
    except (ValueError, GenerationError) as exc:
        raise ConfigError(str(exc)) from exc
    atomic_write(args.out, dump_map(grid))
    log.info("wrote %s (%dx%d cells)", args.out, grid.width, grid.height)
    return EXIT_OK


def cmd_gen_episodes(args) -> int:
    seed = _resolve_seed(0, args.seed, os.environ)
    grid = read_map(args.map)
    try:
        constraints = EpisodeConstraints(args.min_geo, args.max_geo, args.min_ratio)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    map_id = args.map_id or Path(args.map).stem
    try:
        episodes = generate_episodes(
            grid, args.n, constraints, np.random.default_rng(seed), map_id=map_id, radius=args.radius
        )
    except (ValueError, GenerationError) as exc:
        raise ConfigError(str(exc)) from exc
    atomic_write(args.out, "".join(json.dumps(ep.to_dict()) + "\n" for ep in episodes))
    log.info("wrote %d episodes to %s", len(episodes), args.out)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.seed)
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = replace(cfg, workers=args.workers)
    if args.output_dir is not None:
        cfg = replace(cfg, output_dir=str(Path(args.output_dir).resolve()))
    out_dir = cfg.resolve(cfg.output_dir)
    logs, report = run_from_config(cfg)
    for lg in logs:
        atomic_write(out_dir / "trajectories" / f"{lg.episode_id}.jsonl", dumps_log(lg))
    atomic_write(out_dir / "metrics.json", _with_header(report.to_dict(), cfg.digest, cfg.seed))
    atomic_write(out_dir / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    log.info("success %.3f  spl %.3f over %d episodes", report.success_rate, report.spl, report.episodes)
    return EXIT_OK


def _with_header(report: dict, digest: str, seed: int | None) -> str:
    from .metrics import _finite

    doc = {"config_digest": digest, "seed": seed, **_finite(report)}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def cmd_ceiling(args) -> int:
    if args.config:
        data = read_config_file(args.config)
        base = Path(args.config).parent
    else:
        data = {}
        base = Path(".")
    _check_keys("ceiling config", data, ("map", "episodes", "seed", "actuation", "policy", "radius", "workers"))
    seed = _resolve_seed(data.get("seed", 0), args.seed, os.environ)
    map_path = args.map or data.get("map")
    ep_path = args.episodes or data.get("episodes")
    if not map_path or not ep_path:
        raise ConfigError("ceiling needs a map and an episodes file")
    if not args.map:
        map_path = base / map_path
    if not args.episodes:
        ep_path = base / ep_path
    try:
        actuation = ActuationNoiseConfig.noiseless() if args.zero_noise else ActuationNoiseConfig.from_dict(data.get("actuation"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    policy = _dataclass_from(PolicyParams, "policy", data.get("policy"))
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    grid = read_map(map_path)
    episodes = read_episodes(ep_path)
    world = World(grid, float(data.get("radius", DEFAULT_RADIUS)))
    digest = config_digest(
        {"seed": seed, "actuation": actuation.to_dict(), "policy": vars(policy).copy(), "trials": args.trials,
         "radius": world.radius, "map": str(map_path), "episodes": str(ep_path)}
    )
    report = run_ceiling([(world, episodes)], actuation, args.trials, seed, policy,
                         workers=args.workers or int(data.get("workers", 1)))
    body = json.loads(report.to_json())
    atomic_write(args.out, json.dumps({"config_digest": digest, **body}, indent=2, sort_keys=True) + "\n")
    log.info("ceiling spl %.3f success %.3f", report.spl, report.success)
    return EXIT_OK


def _parse_floats(text: str | None, default, allow_inf=False):
    if text is None:
        return tuple(default)
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None
    if not values or (not allow_inf and not all(math.isfinite(v) for v in values)):
        raise ConfigError(f"invalid number list {text!r}")
    return values


def cmd_metrics(args) -> int:
    thresholds = _parse_floats(args.thresholds, DEFAULT_THRESHOLDS)
    bins = _parse_floats(args.bins, DEFAULT_BINS, allow_inf=True)
    if any(t <= 0 for t in thresholds):
        raise ConfigError("thresholds must be positive")
    if len(bins) < 2 or any(b <= a for a, b in zip(bins, bins[1:])):
        raise ConfigError("bin edges must be strictly increasing")
    logs = read_trajectories(args.traj_dir)
    digests = sorted({lg.config_digest for lg in logs})
    report = evaluate_logs(logs, thresholds, bins)
    digest = digests[0] if len(digests) == 1 else config_digest(digests)
    atomic_write(args.out, _with_header(report.to_dict(), digest, None))
    return EXIT_OK


def cmd_export_vo(args) -> int:
    logs = read_trajectories(args.traj_dir)
    for lg in logs:
        if lg.initial_scan is None:
            raise ConfigError(f"trajectory {lg.episode_id} was recorded without scans (set store_scans)")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{out.name}.", dir=out.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            count = export_tuples(logs, fh, flip=args.flip, swap=args.swap, swap_forward=args.swap_forward)
        os.replace(tmp, out)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    log.info("wrote %d tuples to %s", count, out)
    return EXIT_OK


def cmd_render(args) -> int:
    if not Path(args.map).is_file():
        raise ConfigError(f"map file not found: {args.map}")
    grid = read_map(args.map)
    try:
        text = Path(args.trajectory).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read trajectory {args.trajectory}: {exc}") from exc
    try:
        lg = loads_log(text)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{args.trajectory}: malformed trajectory log ({exc})") from exc
    atomic_write(args.out, render_svg(lg, grid, args.scale))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="realnav", description="Noisy PointGoal navigation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-map", help="generate a multi-room occupancy map")
    g.add_argument("--width", type=int, default=200)
    g.add_argument("--height", type=int, default=150)
    g.add_argument("--cell-size", type=float, default=0.1)
    g.add_argument("--rooms", type=int, default=6)
    g.add_argument("--clutter", type=int, default=3)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_map)

    e = sub.add_parser("gen-episodes", help="sample start/goal episodes on a map")
    e.add_argument("--map", required=True)
    e.add_argument("--n", type=int, required=True)
    e.add_argument("--min-geo", type=float, default=1.5)
    e.add_argument("--max-geo", type=float, default=15.0)
    e.add_argument("--min-ratio", type=float, default=1.0)
    e.add_argument("--radius", type=float, default=DEFAULT_RADIUS)
    e.add_argument("--map-id")
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_gen_episodes)

    r = sub.add_parser("run", help="run episodes from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--workers", type=int)
    r.add_argument("--output-dir")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("ceiling", help="oracle-follower SPL ceiling under actuation noise")
    c.add_argument("--config")
    c.add_argument("--map")
    c.add_argument("--episodes")
    c.add_argument("--trials", type=int, default=3)
    c.add_argument("--zero-noise", action="store_true")
    c.add_argument("--seed", type=int)
    c.add_argument("--workers", type=int)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_ceiling)

    m = sub.add_parser("metrics", help="aggregate metrics over a trajectory directory")
    m.add_argument("--traj-dir", required=True)
    m.add_argument("--thresholds", help="comma-separated success thresholds in metres")
    m.add_argument("--bins", help="comma-separated geodesic bin edges in metres (inf allowed)")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_metrics)

    x = sub.add_parser("export-vo", help="export VO training tuples from trajectories with scans")
    x.add_argument("--traj-dir", required=True)
    x.add_argument("--flip", action="store_true")
    x.add_argument("--swap", action="store_true")
    x.add_argument("--swap-forward", choices=("skip", "unlabeled"), default="skip")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_vo)

    d = sub.add_parser("render", help="render a trajectory as a top-down SVG")
    d.add_argument("--trajectory", required=True)
    d.add_argument("--map", required=True)
    d.add_argument("--scale", type=float, default=40.0, help="pixels per metre")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_render)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # reported, not re-raised: the exit code carries it
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
