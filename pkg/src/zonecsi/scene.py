"""Synthetic site geometry and zone-structured multipath channels.

A scene is a rectangular cell tiled into generator zones. Each zone owns a
fixed set of point scatterers, so every UE inside a zone sees the same
departure directions for its scattered paths. Channels are built with the
geometric wideband model

    h_k = sum_l alpha_l * exp(-j 2 pi f_k tau_l) * a(az_l, el_l),  f_k = k W / K

The module also provides the Karhunen-Loeve zone-subspace model used for
controlled experiments (``generate_kl_channels`` / ``estimate_zone_subspace``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, OutOfDomainError

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array in the y-z plane, boresight along +x."""

    n_horizontal: int = 16
    n_vertical: int = 4
    element_spacing: float = 0.5  # in wavelengths

    def __post_init__(self):
        if self.n_horizontal < 1 or self.n_vertical < 1:
            raise ConfigError("array dimensions must be positive")
        if not self.element_spacing > 0:
            raise ConfigError("element_spacing must be positive")

    @property
    def n_antennas(self) -> int:
        return self.n_horizontal * self.n_vertical


def array_response(geometry: ArrayGeometry, azimuth: float, elevation: float) -> np.ndarray:
    """Steering vector of length N_t; element ``n_h + N_h * n_v``."""
    n_h = np.arange(geometry.n_horizontal)
    n_v = np.arange(geometry.n_vertical)
    u = math.cos(elevation) * math.sin(azimuth)
    v = math.sin(elevation)
    phase = 2 * np.pi * geometry.element_spacing * (n_h[None, :] * u + n_v[:, None] * v)
    return np.exp(1j * phase).reshape(-1)


@dataclass(frozen=True)
class PathComponent:
    gain_amplitude: float
    gain_phase: float
    azimuth_aod: float
    elevation_aod: float
    delay: float

    @property
    def complex_gain(self) -> complex:
        return self.gain_amplitude * complex(math.cos(self.gain_phase), math.sin(self.gain_phase))


def channel_from_paths(geometry: ArrayGeometry, paths, bandwidth: float, num_subcarriers: int) -> np.ndarray:
    """Evaluate the wideband geometric model. Returns an N_t x K complex matrix."""
    freqs = np.arange(num_subcarriers) * (bandwidth / num_subcarriers)
    h = np.zeros((geometry.n_antennas, num_subcarriers), dtype=np.complex128)
    for p in paths:
        a = array_response(geometry, p.azimuth_aod, p.elevation_aod)
        tone = np.exp(-2j * np.pi * freqs * p.delay)
        h += p.complex_gain * np.outer(a, tone)
    return h


@dataclass(frozen=True)
class SceneConfig:
    cell_origin: tuple = (40.0, -40.0)
    cell_size: tuple = (160.0, 80.0)  # (width along x, height along y), meters
    ue_height: float = 1.5
    grid_shape: tuple = (100, 100)  # UE grid points along (x, y)
    bs_position: tuple = (-150.0, 0.0, 25.0)
    array: ArrayGeometry = field(default_factory=ArrayGeometry)
    num_generator_zones: int = 8
    scatterers_per_zone: int = 6
    scatterer_height: tuple = (0.0, 15.0)
    carrier_frequency: float = 3.5e9
    bandwidth: float = 16e6
    num_subcarriers: int = 64
    delay_taps: int = 32  # N_c; every path delay must stay below delay_taps / bandwidth
    pathloss_exponent: float = 3.0
    max_paths: int = 15
    rng_seed: int = 0

    def validate(self):
        w, h = self.cell_size
        if not (w > 0 and h > 0):
            raise ConfigError(f"cell must have positive area, got size {self.cell_size}")
        for name in ("num_generator_zones", "scatterers_per_zone", "num_subcarriers", "delay_taps", "max_paths"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if min(self.grid_shape) < 1:
            raise ConfigError("grid_shape entries must be >= 1")
        if not self.bandwidth > 0:
            raise ConfigError("bandwidth must be positive")
        if not self.carrier_frequency > 0:
            raise ConfigError("carrier_frequency must be positive")
        if self.num_subcarriers < self.delay_taps:
            raise ConfigError("num_subcarriers must be >= delay_taps")
        lo, hi = self.scatterer_height
        if hi < lo:
            raise ConfigError("scatterer_height must be (low, high)")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency

    @property
    def max_delay(self) -> float:
        return self.delay_taps / self.bandwidth


def tile_grid(n: int) -> tuple[int, int]:
    """Near-square (rows, cols) factorization of n, rows <= cols."""
    rows = max(d for d in range(1, math.isqrt(n) + 1) if n % d == 0)
    return rows, n // rows


@dataclass(frozen=True, eq=False)
class Scene:
    config: SceneConfig
    tiles: np.ndarray  # (Z, 4): x0, x1, y0, y1, row-major over (row along y, col along x)
    scatterers: np.ndarray  # (Z, S, 3)
    scatterer_phases: np.ndarray  # (Z, S)
    ue_positions: np.ndarray  # (U, 3)

    @property
    def bounds(self):
        (x0, y0), (w, h) = self.config.cell_origin, self.config.cell_size
        return x0, x0 + w, y0, y0 + h

    def contains(self, position, tol: float = 1e-9) -> bool:
        x0, x1, y0, y1 = self.bounds
        return x0 - tol <= position[0] <= x1 + tol and y0 - tol <= position[1] <= y1 + tol

    def generator_zone(self, position) -> int:
        """1-based index of the generator tile holding ``position``."""
        x0, x1, y0, y1 = self.bounds
        rows, cols = tile_grid(self.config.num_generator_zones)
        col = min(max(int((position[0] - x0) / ((x1 - x0) / cols)), 0), cols - 1)
        row = min(max(int((position[1] - y0) / ((y1 - y0) / rows)), 0), rows - 1)
        return row * cols + col + 1


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def generate_scene(config: SceneConfig) -> Scene:
    config.validate()
    rng = np.random.default_rng(config.rng_seed)
    (x0, y0), (w, h) = config.cell_origin, config.cell_size
    rows, cols = tile_grid(config.num_generator_zones)
    tw, th = w / cols, h / rows

    tiles = np.array(
        [[x0 + c * tw, x0 + (c + 1) * tw, y0 + r * th, y0 + (r + 1) * th] for r in range(rows) for c in range(cols)]
    )
    n_z, n_s = config.num_generator_zones, config.scatterers_per_zone
    u = rng.random((n_z, n_s, 3))
    lo_z, hi_z = config.scatterer_height
    scatterers = np.empty((n_z, n_s, 3))
    scatterers[..., 0] = tiles[:, None, 0] + u[..., 0] * tw
    scatterers[..., 1] = tiles[:, None, 2] + u[..., 1] * th
    scatterers[..., 2] = lo_z + u[..., 2] * (hi_z - lo_z)
    phases = rng.uniform(0.0, 2 * np.pi, size=(n_z, n_s))

    nx, ny = config.grid_shape
    gx = x0 + (np.arange(nx) + 0.5) * (w / nx)
    gy = y0 + (np.arange(ny) + 0.5) * (h / ny)
    xx, yy = np.meshgrid(gx, gy, indexing="xy")
    ue = np.column_stack([xx.ravel(), yy.ravel(), np.full(xx.size, config.ue_height)])

    scene = Scene(config, _readonly(tiles), _readonly(scatterers), _readonly(phases), _readonly(ue))
    _check_delay_budget(scene)
    return scene


def _check_delay_budget(scene: Scene):
    # distance to a point is convex, so the worst case over a tile sits at a corner
    cfg = scene.config
    bs = np.asarray(cfg.bs_position, dtype=float)
    x0, x1, y0, y1 = scene.bounds
    corners = np.array([[x, y, cfg.ue_height] for x in (x0, x1) for y in (y0, y1)])
    worst = np.linalg.norm(corners - bs, axis=1).max()
    for z, tile in enumerate(scene.tiles):
        tc = np.array([[x, y, cfg.ue_height] for x in tile[:2] for y in tile[2:]])
        for s in scene.scatterers[z]:
            worst = max(worst, np.linalg.norm(s - bs) + np.linalg.norm(tc - s, axis=1).max())
    if worst / SPEED_OF_LIGHT >= cfg.max_delay:
        raise ConfigError(
            f"longest path {worst:.1f} m exceeds the delay window "
            f"{cfg.max_delay * SPEED_OF_LIGHT:.1f} m (delay_taps / bandwidth)"
        )


def _departure(bs: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    d = target - bs
    return math.atan2(d[1], d[0]), math.atan2(d[2], math.hypot(d[0], d[1]))


def scene_paths(scene: Scene, ue_position) -> list[PathComponent]:
    cfg = scene.config
    ue = np.asarray(ue_position, dtype=float)
    if ue.shape == (2,):
        ue = np.append(ue, cfg.ue_height)
    if not scene.contains(ue):
        raise OutOfDomainError(f"UE position {tuple(ue)} lies outside the cell {scene.bounds}")
    bs = np.asarray(cfg.bs_position, dtype=float)
    lam = cfg.wavelength
    half_exp = cfg.pathloss_exponent / 2

    def make(length, base_phase, toward):
        az, el = _departure(bs, toward)
        phase = (base_phase + 2 * np.pi * length / lam) % (2 * np.pi)
        return PathComponent(length ** -half_exp, phase, az, el, length / SPEED_OF_LIGHT)

    los = float(np.linalg.norm(ue - bs))
    paths = [make(los, 0.0, ue)]
    z = scene.generator_zone(ue) - 1
    for s, ph in zip(scene.scatterers[z], scene.scatterer_phases[z]):
        length = float(np.linalg.norm(s - bs) + np.linalg.norm(ue - s))
        paths.append(make(length, float(ph), s))

    if len(paths) > cfg.max_paths:
        order = sorted(range(len(paths)), key=lambda i: -paths[i].gain_amplitude)
        paths = [paths[i] for i in sorted(order[: cfg.max_paths])]
    return paths


@dataclass(frozen=True, eq=False)
class ChannelSample:
    position: np.ndarray  # (3,)
    channel: np.ndarray  # (N_t, K) complex


def synthesize_channel(scene: Scene, ue_position) -> ChannelSample:
    cfg = scene.config
    paths = scene_paths(scene, ue_position)
    h = channel_from_paths(cfg.array, paths, cfg.bandwidth, cfg.num_subcarriers)
    pos = np.asarray(ue_position, dtype=float)
    if pos.shape == (2,):
        pos = np.append(pos, cfg.ue_height)
    return ChannelSample(pos, h)


def synthesize_dataset(scene: Scene, positions=None) -> tuple[np.ndarray, np.ndarray]:
    """Channels for every UE grid point. Returns (positions (U, 3), channels (U, N_t, K))."""
    positions = scene.ue_positions if positions is None else np.asarray(positions, dtype=float)
    cfg = scene.config
    out = np.empty((len(positions), cfg.array.n_antennas, cfg.num_subcarriers), dtype=np.complex128)
    for i, p in enumerate(positions):
        out[i] = synthesize_channel(scene, p).channel
    return positions.copy(), out


# Karhunen-Loeve zone subspaces


@dataclass(frozen=True, eq=False)
class ZoneSubspace:
    basis: np.ndarray  # (D, r) orthonormal columns
    eigenvalues: np.ndarray  # (r,) positive, non-increasing

    def __post_init__(self):
        V, lam = self.basis, self.eigenvalues
        if V.ndim != 2 or lam.shape != (V.shape[1],):
            raise ConfigError("basis must be D x r with r eigenvalues")
        if not np.all(lam > 0):
            raise ConfigError("eigenvalues must be positive")
        if np.any(np.diff(lam) > 0):
            raise ConfigError("eigenvalues must be non-increasing")
        gram = V.conj().T @ V
        if np.abs(gram - np.eye(V.shape[1])).max() > 1e-10:
            raise ConfigError("basis columns are not orthonormal")

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    def covariance(self) -> np.ndarray:
        return (self.basis * self.eigenvalues) @ self.basis.conj().T


def complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Circularly-symmetric CN(0, 1) samples."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def generate_kl_channels(subspace: ZoneSubspace, count: int, seed) -> np.ndarray:
    """``count`` draws of V diag(sqrt(lambda)) w, returned as rows of a (count, D) array."""
    rng = np.random.default_rng(seed)
    w = complex_normal(rng, (count, subspace.rank))
    return (w * np.sqrt(subspace.eigenvalues)) @ subspace.basis.T


def random_subspace(dim: int, eigenvalues, seed) -> ZoneSubspace:
    """Haar-ish random orthonormal basis with the given spectrum."""
    rng = np.random.default_rng(seed)
    lam = np.sort(np.asarray(eigenvalues, dtype=float))[::-1]
    q, r = np.linalg.qr(complex_normal(rng, (dim, len(lam))))
    q = q * (np.diag(r) / np.abs(np.diag(r)))  # fix column phases for determinism
    return ZoneSubspace(q, lam)


def estimate_zone_subspace(channels, energy_fraction: float = 0.99) -> ZoneSubspace:
    X = np.asarray(channels)
    if X.ndim != 2 or len(X) < 2:
        raise DegenerateInputError("need at least two channel vectors")
    if not 0 < energy_fraction <= 1:
        raise ConfigError("energy_fraction must lie in (0, 1]")
    if not np.any(X):
        raise DegenerateInputError("all channel vectors are zero")
    cov = X.T @ X.conj() / len(X)  # (1/N) sum h h^H
    lam, V = np.linalg.eigh(cov)
    lam, V = lam[::-1], V[:, ::-1]
    lam = np.clip(lam, 0.0, None)
    csum = np.cumsum(lam)
    r = int(np.searchsorted(csum, energy_fraction * csum[-1], side="left")) + 1
    r = min(r, int(np.count_nonzero(lam > 0)))
    return ZoneSubspace(np.ascontiguousarray(V[:, :r]), lam[:r].copy())
