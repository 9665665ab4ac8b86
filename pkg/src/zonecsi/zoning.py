"""Position-based spatial zones.

Zone ids are 1-based everywhere in the public API. Ties (equal distances or
equal reconstruction errors) go to the smallest zone id.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyZoneError


@dataclass(frozen=True, eq=False)
class ZonePartition:
    centroids: np.ndarray  # (B, 2)

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=float)
        if c.ndim != 2 or c.shape[1] != 2 or len(c) < 1:
            raise ConfigError("centroids must be a non-empty (B, 2) array")
        if len(np.unique(c, axis=0)) != len(c):
            raise ConfigError("centroids must be pairwise distinct")
        object.__setattr__(self, "centroids", c)

    @property
    def B(self) -> int:
        return len(self.centroids)

    @property
    def zone_ids(self) -> list[int]:
        return list(range(1, self.B + 1))

    def classify(self, positions) -> np.ndarray:
        """Vectorized :func:`classify_position` over rows of ``positions``."""
        p = np.atleast_2d(np.asarray(positions, dtype=float))[:, :2]
        d2 = ((p[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=-1)
        return np.argmin(d2, axis=1) + 1  # argmin keeps the first minimum

    def __call__(self, position) -> int:
        return classify_position(self, position)


def classify_position(partition: ZonePartition, x) -> int:
    return int(partition.classify(np.asarray(x)[None, :2])[0])


@dataclass
class KMeansResult:
    partition: ZonePartition
    labels: np.ndarray  # 1-based
    inertia_history: list
    iterations: int

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _kmeanspp(points, k, rng):
    n = len(points)
    centers = [points[rng.integers(n)]]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total == 0:
            # fewer distinct points than k; pick any unused point
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=float)


def _assign(points, centers):
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(len(points)), labels]


def kmeans_positions(positions, B: int, seed=0, max_iters: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding on ground-plane coordinates.

    An emptied cluster is re-seeded at the point farthest from its current
    centroid. Inertia is asserted non-increasing across iterations.
    """
    pts = np.asarray(positions, dtype=float)
    pts = np.atleast_2d(pts)[:, :2]
    if B < 1:
        raise ConfigError("B must be >= 1")
    if B > len(pts):
        raise ConfigError(f"B={B} exceeds the number of positions ({len(pts)})")
    if len(np.unique(pts, axis=0)) < B:
        raise ConfigError(f"need at least B={B} distinct positions")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(pts, B, rng)
    labels, d2 = _assign(pts, centers)
    history = [float(d2.sum())]
    it = 0
    for it in range(1, max_iters + 1):
        new = centers.copy()
        for b in range(B):
            members = labels == b
            if members.any():
                new[b] = pts[members].mean(axis=0)
        new_labels, new_d2 = _assign(pts, new)
        for b in range(B):
            if not np.any(new_labels == b):
                far = int(np.argmax(new_d2))
                new[b] = pts[far]
                new_labels, new_d2 = _assign(pts, new)
        inertia = float(new_d2.sum())
        assert inertia <= history[-1] * (1 + 1e-12) + 1e-12, "k-means inertia increased"
        history.append(inertia)
        stable = np.array_equal(new_labels, labels)
        centers, labels = new, new_labels
        if stable:
            break
    return KMeansResult(ZonePartition(centers), labels + 1, history, it)


@dataclass
class ZonedDataset:
    """Per-zone index arrays into the source dataset, zone b at position b - 1."""

    indices: list

    def subset(self, zone_id: int) -> np.ndarray:
        return self.indices[zone_id - 1]

    @property
    def sizes(self) -> list[int]:
        return [len(i) for i in self.indices]


def partition_dataset(positions, partition: ZonePartition, allow_empty: bool = False) -> ZonedDataset:
    labels = partition.classify(positions)
    groups = [np.flatnonzero(labels == b) for b in partition.zone_ids]
    if sum(len(g) for g in groups) != len(labels):
        raise AssertionError("zone subsets do not cover the dataset")
    if not allow_empty:
        for b, g in zip(partition.zone_ids, groups):
            if len(g) == 0:
                raise EmptyZoneError(b)
    return ZonedDataset(groups)


def reconstruction_errors(models, vectors) -> np.ndarray:
    """Squared reconstruction error of every model on every vector, shape (N, B)."""
    from .autoenc import reconstruct

    v = np.atleast_2d(np.asarray(vectors, dtype=float))
    cols = []
    for m in models:
        if m.spec.input_dim != v.shape[1]:
            raise ConfigError(f"model input dimension {m.spec.input_dim} != vector length {v.shape[1]}")
        cols.append(((reconstruct(m, v) - v) ** 2).sum(axis=1))
    return np.column_stack(cols)


def oracle_zone_assignment(models, v) -> tuple[int, float]:
    """The zone whose model reconstructs ``v`` best, with that squared error."""
    err = reconstruction_errors(models, v)[0]
    b = int(np.argmin(err))
    return b + 1, float(err[b])
