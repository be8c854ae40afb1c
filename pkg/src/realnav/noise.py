"""Actuation and range-sensor noise, schedule-independent RNG streams, and
median de-noising of scans."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .geometry import Action, Egomotion, nominal_egomotion
from .gridworld import DepthScan
from .validation import check_int, check_positive, check_probability

TRUNCATION = 3.0
MIN_RANGE = 1e-6


@dataclass(frozen=True)
class MotionNoise:
    sigma_along: float = 0.0
    sigma_cross: float = 0.0
    sigma_yaw: float = 0.0
    bias_along: float = 0.0
    bias_yaw: float = 0.0

    def __post_init__(self):
        for name in ("sigma_along", "sigma_cross", "sigma_yaw"):
            check_positive(getattr(self, name), name, allow_zero=True)
        # 3-sigma truncation must keep a single step within |e| <= 1 m / pi rad
        if abs(self.bias_along) + TRUNCATION * self.sigma_along + 0.25 > 1.0:
            raise ValueError("sigma_along/bias_along too large for a single step")
        if TRUNCATION * self.sigma_cross > 1.0:
            raise ValueError("sigma_cross too large for a single step")
        if abs(self.bias_yaw) + TRUNCATION * self.sigma_yaw + math.pi / 6 > math.pi:
            raise ValueError("sigma_yaw/bias_yaw too large for a single step")


def _default_forward() -> MotionNoise:
    return MotionNoise(sigma_along=0.025, sigma_cross=0.010, sigma_yaw=math.radians(1.5))


def _default_turn() -> MotionNoise:
    return MotionNoise(sigma_along=0.005, sigma_cross=0.005, sigma_yaw=math.radians(1.7))


@dataclass(frozen=True)
class ActuationNoiseConfig:
    move_forward: MotionNoise = field(default_factory=_default_forward)
    turn_left: MotionNoise = field(default_factory=_default_turn)
    turn_right: MotionNoise = field(default_factory=_default_turn)

    @classmethod
    def noiseless(cls) -> "ActuationNoiseConfig":
        return cls(MotionNoise(), MotionNoise(), MotionNoise())

    def for_action(self, action: Action) -> MotionNoise:
        if action is Action.MOVE_FORWARD:
            return self.move_forward
        if action is Action.TURN_LEFT:
            return self.turn_left
        if action is Action.TURN_RIGHT:
            return self.turn_right
        raise ValueError("STOP has no actuation")

    def to_dict(self) -> dict:
        return {f.name: vars(getattr(self, f.name)).copy() for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict | None) -> "ActuationNoiseConfig":
        d = dict(d or {})
        defaults = cls()
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown actuation noise keys: {sorted(unknown)}")
        kwargs = {}
        for f in fields(cls):
            base = vars(getattr(defaults, f.name)).copy()
            override = d.get(f.name) or {}
            bad = set(override) - set(base)
            if bad:
                raise ValueError(f"unknown keys in actuation.{f.name}: {sorted(bad)}")
            base.update(override)
            kwargs[f.name] = MotionNoise(**base)
        return cls(**kwargs)


@dataclass(frozen=True)
class SensorNoiseConfig:
    mult_sigma: float = 0.01
    dropout_prob: float = 0.01

    def __post_init__(self):
        check_positive(self.mult_sigma, "mult_sigma", allow_zero=True)
        check_probability(self.dropout_prob, "dropout_prob")

    @classmethod
    def noiseless(cls) -> "SensorNoiseConfig":
        return cls(0.0, 0.0)

    def to_dict(self) -> dict:
        return {"mult_sigma": self.mult_sigma, "dropout_prob": self.dropout_prob}

    @classmethod
    def from_dict(cls, d: dict | None) -> "SensorNoiseConfig":
        d = dict(d or {})
        unknown = set(d) - {"mult_sigma", "dropout_prob"}
        if unknown:
            raise ValueError(f"unknown sensor noise keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- RNG streams


@dataclass(frozen=True)
class RngStream:
    global_seed: int
    episode_id: str
    stream_label: str

    @property
    def key(self) -> int:
        return mix_seed(self.global_seed, self.episode_id, self.stream_label)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key))


def mix_seed(global_seed: int, episode_id, stream_label: str) -> int:
    """64-bit key from (seed, episode, label) via BLAKE2b; order independent."""
    payload = b"\x00".join(
        [
            struct.pack("<Q", int(global_seed) & 0xFFFFFFFFFFFFFFFF),
            str(episode_id).encode("utf-8"),
            str(stream_label).encode("utf-8"),
        ]
    )
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def derive_rng(global_seed: int, episode_id, stream_label: str) -> np.random.Generator:
    """Fresh generator for one (seed, episode, stream) triple.

    The state depends only on the triple, so episodes can be executed in any
    order or on any number of workers with bit-identical draws.
    """
    return RngStream(int(global_seed), str(episode_id), str(stream_label)).generator()


def truncated_normal(rng: np.random.Generator, sigma: float, size=None):
    """Zero-mean Gaussian rejected outside +-3 sigma.

    Draws are consumed even when ``sigma`` is zero so that a stream stays
    aligned across noise configurations.
    """
    if size is None:
        while True:
            v = rng.standard_normal()
            if abs(v) <= TRUNCATION:
                return sigma * v
    out = rng.standard_normal(size)
    bad = np.abs(out) > TRUNCATION
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > TRUNCATION
    return sigma * out


def sample_actuation(action: Action, cfg: ActuationNoiseConfig, rng: np.random.Generator) -> Egomotion:
    action = Action(action)
    if action is Action.STOP:
        raise ValueError("STOP has no egomotion to sample")
    nominal = nominal_egomotion(action)
    m = cfg.for_action(action)
    # fixed draw order keeps streams comparable across configs
    d_along = truncated_normal(rng, m.sigma_along)
    d_cross = truncated_normal(rng, m.sigma_cross)
    d_yaw = truncated_normal(rng, m.sigma_yaw)
    return Egomotion(
        nominal.ex + m.bias_along + d_along,
        nominal.ey + d_cross,
        nominal.etheta + m.bias_yaw + d_yaw,
    )


def corrupt_scan(scan: DepthScan, cfg: SensorNoiseConfig, rng: np.random.Generator) -> DepthScan:
    if cfg.mult_sigma == 0.0 and cfg.dropout_prob == 0.0:
        return scan
    ranges = scan.ranges * (1.0 + cfg.mult_sigma * rng.standard_normal(scan.n_rays))
    ranges = np.clip(ranges, MIN_RANGE, scan.max_range)
    drop = rng.random(scan.n_rays) < cfg.dropout_prob
    ranges[drop] = scan.max_range
    return scan.with_ranges(ranges)


def median_filter(scan: DepthScan, window: int) -> DepthScan:
    """Running median over a window clipped at the scan ends."""
    check_int(window, "window", minimum=1)
    if window % 2 == 0:
        raise ValueError(f"median window must be odd, got {window}")
    if window > scan.n_rays:
        raise ValueError(f"median window {window} exceeds n_rays {scan.n_rays}")
    if window == 1:
        return scan
    half = window // 2
    r = scan.ranges
    out = np.array([np.median(r[max(0, k - half) : k + half + 1]) for k in range(scan.n_rays)])
    return scan.with_ranges(out)
