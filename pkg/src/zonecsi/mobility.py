"""UE mobility, zone-switch counting and model-download overhead.

Rates are derived from integer event counts and exact rational horizons, and
converted to float only at the end.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError

POLICIES = ("download-all-once", "per-switch", "cache")
KMH = 1000.0 / 3600.0


@dataclass(frozen=True)
class MobilityConfig:
    speed: float = 10 * KMH  # m/s
    horizon: float = 3600.0  # s
    dt: float = 1.0  # s
    region_origin: tuple = (40.0, -40.0)
    region_size: tuple = (160.0, 80.0)
    seed: int = 0

    def __post_init__(self):
        if not self.speed > 0:
            raise ConfigError("speed must be positive")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not self.horizon >= self.dt:
            raise ConfigError("horizon must be at least one sample interval")
        if min(self.region_size) <= 0:
            raise ConfigError("mobility region must have positive area")

    @property
    def num_samples(self) -> int:
        return int(np.floor(self.horizon / self.dt + 1e-9)) + 1


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray  # (P,)
    positions: np.ndarray  # (P, 2)
    path_length: float = float("nan")

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        p = np.asarray(self.positions, dtype=float).reshape(len(t), -1)[:, :2]
        if len(t) and np.any(np.diff(t) <= 0):
            raise ConfigError("trajectory times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", p)

    def __len__(self):
        return len(self.times)


def simulate_trajectory(config: MobilityConfig) -> Trajectory:
    """Random-waypoint walk sampled every ``dt``.

    The UE starts at a uniform point, heads in a straight line toward a uniform
    destination and draws a new one on arrival. Any distance left over in a
    step after reaching a waypoint is spent on the next leg, so the distance
    travelled is exactly ``speed * dt`` per step.
    """
    rng = np.random.default_rng(config.seed)
    lo = np.asarray(config.region_origin, dtype=float)
    size = np.asarray(config.region_size, dtype=float)

    def draw():
        return lo + rng.random(2) * size

    n = config.num_samples
    step = config.speed * config.dt
    pos = draw()
    dest = draw()
    out = np.empty((n, 2))
    out[0] = pos
    odometer = 0.0
    for i in range(1, n):
        remaining = step
        while remaining > 0:
            gap = float(np.hypot(*(dest - pos)))
            if gap <= remaining:
                pos = dest
                remaining -= gap
                odometer += gap
                dest = draw()
            else:
                pos = pos + (dest - pos) * (remaining / gap)
                odometer += remaining
                remaining = 0.0
        out[i] = pos
    # float drift can leave a point a hair outside the rectangle
    np.clip(out, lo, lo + size, out=out)
    times = np.arange(n) * config.dt
    return Trajectory(times, out, odometer)


@dataclass(frozen=True)
class SwitchStats:
    n_zs: int
    horizon: float  # t_P - t_1, seconds
    zones: tuple = ()

    @property
    def rate_exact(self) -> Fraction:
        return Fraction(self.n_zs) / Fraction(self.horizon)

    @property
    def r_zs(self) -> float:
        return float(self.rate_exact)

    @property
    def mean_dwell(self) -> Optional[float]:
        """Average time between switches, ``None`` when there is no switch."""
        return self.horizon / self.n_zs if self.n_zs else None


def switch_stats_from_zones(zones: Sequence[int], times) -> SwitchStats:
    z = [int(v) for v in zones]
    t = np.asarray(times, dtype=float)
    if len(z) < 2:
        raise ConfigError("need at least two samples to count zone switches")
    if len(t) != len(z):
        raise ConfigError("zones and times must have equal length")
    n_zs = sum(a != b for a, b in zip(z[:-1], z[1:]))
    return SwitchStats(n_zs, float(t[-1] - t[0]), tuple(z))


def count_zone_switches(trajectory: Trajectory, classifier: Callable) -> SwitchStats:
    """Count consecutive sample pairs that land in different zones.

    ``classifier`` maps an (N, 2) array of positions to N zone ids, e.g.
    ``ZonePartition.classify``.
    """
    if len(trajectory) < 2:
        raise ConfigError("need at least two samples to count zone switches")
    zones = np.asarray(classifier(trajectory.positions))
    return switch_stats_from_zones(zones, trajectory.times)


def switch_rate_over_seeds(config: MobilityConfig, classifier, repeats: int) -> tuple[float, float]:
    """Mean and standard deviation of r_zs over ``repeats`` seeds starting at ``config.seed``."""
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    rates = [
        count_zone_switches(simulate_trajectory(replace(config, seed=config.seed + i)), classifier).r_zs
        for i in range(repeats)
    ]
    return float(np.mean(rates)), float(np.std(rates))


def lru_misses(zones: Sequence[int], capacity: int) -> int:
    """Misses of a least-recently-used cache replaying ``zones``; first accesses miss."""
    if capacity < 1:
        raise ConfigError("cache capacity must be >= 1")
    cache: OrderedDict = OrderedDict()
    misses = 0
    for z in zones:
        if z in cache:
            cache.move_to_end(z)
            continue
        misses += 1
        cache[z] = None
        if len(cache) > capacity:
            cache.popitem(last=False)
    return misses


@dataclass(frozen=True)
class OverheadReport:
    policy: str
    v_encoder: int
    B: int
    cache_capacity: Optional[int]
    horizon: float
    downloads: int  # encoder downloads, including the initial one(s)
    mpur: float  # = r_zs
    extra_params: int = 0  # sent once with the first download, e.g. the position classifier

    @property
    def mptr(self) -> float:
        return float(Fraction(self.v_encoder * self.downloads + self.extra_params) / Fraction(self.horizon))

    @property
    def r_md(self) -> float:
        """Rate of downloads caused by zone switches (initial fill excluded)."""
        initial = self.B if self.policy == "download-all-once" else 1
        return float(Fraction(max(self.downloads - initial, 0)) / Fraction(self.horizon))


def compute_overhead(
    v_encoder: int,
    B: int,
    stats: SwitchStats,
    policy: str = "download-all-once",
    horizon: Optional[float] = None,
    cache_capacity: Optional[int] = None,
    extra_params: int = 0,
) -> OverheadReport:
    """Model-parameter transmission/update rates for one caching policy.

    ``download-all-once`` fetches all B encoders once and amortizes them over
    the horizon. ``per-switch`` holds a single encoder and downloads on every
    zone change. ``cache`` keeps the ``cache_capacity`` most recently used
    encoders. ``extra_params`` are downloaded once on top of the encoders.
    """
    if policy not in POLICIES:
        raise ConfigError(f"policy must be one of {POLICIES}, got {policy!r}")
    if B < 1 or v_encoder < 0 or extra_params < 0:
        raise ConfigError("B must be >= 1, v_encoder and extra_params >= 0")
    T = stats.horizon if horizon is None else float(horizon)
    if not T > 0:
        raise ConfigError("horizon must be positive")
    zones = stats.zones
    if zones and (min(zones) < 1 or max(zones) > B):
        raise ConfigError(f"zone sequence has ids outside 1..{B}")
    if policy == "download-all-once":
        downloads, cap = B, None
    else:
        cap = 1 if policy == "per-switch" else cache_capacity
        if cap is None or not 1 <= cap <= B:
            raise ConfigError(f"cache capacity must lie in [1, {B}], got {cap}")
        if zones:
            downloads = lru_misses(zones, cap)
        elif cap == 1:
            downloads = 1 + stats.n_zs
        else:
            raise ConfigError("cache replay needs the zone sequence")
    return OverheadReport(policy, int(v_encoder), int(B), cap, T, int(downloads), stats.r_zs, int(extra_params))
