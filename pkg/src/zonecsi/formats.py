"""On-disk formats: ZCD1 channel datasets, ZCM1 model bundles, CSV interchange.

All binary fields are little-endian. Parsers check magic, version and the
length arithmetic before allocating anything, so a hostile header cannot
trigger a large allocation. See docs/formats.md for byte layouts.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autoenc import ACTIVATIONS, LayerSpec, ModelParams, count_parameters, param_layout
from .errors import (
    BadMagicError,
    ConfigError,
    CorruptBundleError,
    DataError,
    FormatError,
    TruncatedFileError,
    ZoneCSIError,
)
from .transform import Normalizer
from .zoning import ZonePartition

DATASET_MAGIC = b"ZCD1"
MODEL_MAGIC = b"ZCM1"
FORMAT_VERSION = 1

_ZCD_HEADER = struct.Struct("<4sIIII")  # magic, version, N_t, K, U
_ZCM_HEADER = struct.Struct("<4sIIIIIIIQ")  # magic, version, N_t, N_c, L, beta, act, B, values/zone


# ZCD1 datasets


def _sample_dtype(n_t: int, k: int) -> np.dtype:
    return np.dtype([("position", "<f8", (3,)), ("channel", "<f4", (k, n_t, 2))])


def encode_dataset(positions, channels) -> bytes:
    """Serialize U positions (U, 3) and channels (U, N_t, K) to ZCD1 bytes."""
    pos = np.asarray(positions, dtype=float)
    h = np.asarray(channels)
    if h.ndim != 3 or len(h) == 0:
        raise ConfigError(f"channels must be a non-empty (U, N_t, K) stack, got shape {h.shape}")
    u, n_t, k = h.shape
    if pos.shape != (u, 3):
        raise ConfigError(f"positions must have shape ({u}, 3), got {pos.shape}")
    rec = np.empty(u, dtype=_sample_dtype(n_t, k))
    rec["position"] = pos
    hk = np.swapaxes(h, 1, 2)  # (U, K, N_t): subcarrier-major
    rec["channel"][..., 0] = hk.real
    rec["channel"][..., 1] = hk.imag
    return _ZCD_HEADER.pack(DATASET_MAGIC, FORMAT_VERSION, n_t, k, u) + rec.tobytes()


def decode_dataset(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Parse ZCD1 bytes into positions (U, 3) float64 and channels (U, N_t, K) complex64."""
    buf = memoryview(buf)
    if len(buf) < _ZCD_HEADER.size:
        raise TruncatedFileError(_ZCD_HEADER.size, len(buf), offset=len(buf))
    magic, version, n_t, k, u = _ZCD_HEADER.unpack_from(buf)
    if magic != DATASET_MAGIC:
        raise BadMagicError(f"bad magic {bytes(magic)!r}, expected {DATASET_MAGIC!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported ZCD1 version {version}", offset=4)
    if min(n_t, k, u) < 1:
        raise FormatError(f"header dimensions must be positive (N_t={n_t}, K={k}, U={u})", offset=8)
    per_sample = 24 + 8 * n_t * k
    expected = _ZCD_HEADER.size + u * per_sample
    if len(buf) < expected:
        raise TruncatedFileError(expected, len(buf), offset=len(buf))
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after the last sample", offset=expected)
    rec = np.frombuffer(buf, dtype=_sample_dtype(n_t, k), offset=_ZCD_HEADER.size)
    bad = ~(np.isfinite(rec["position"]).all(axis=1) & np.isfinite(rec["channel"]).reshape(u, -1).all(axis=1))
    if bad.any():
        i = int(np.argmax(bad))
        raise FormatError(f"sample {i} has non-finite values", offset=_ZCD_HEADER.size + i * per_sample)
    pos = rec["position"].astype(np.float64)
    c = rec["channel"]
    h = np.empty((u, k, n_t), dtype=np.complex64)
    h.real = c[..., 0]
    h.imag = c[..., 1]
    return pos, np.ascontiguousarray(np.swapaxes(h, 1, 2))


def write_dataset(path, positions, channels):
    Path(path).write_bytes(encode_dataset(positions, channels))


def read_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    return decode_dataset(Path(path).read_bytes())


# ZCM1 model bundles


@dataclass(eq=False)
class ModelBundle:
    """What the training phase hands to deployment: zone classifier, scaling and B models."""

    spec: LayerSpec
    partition: ZonePartition
    normalizer: Normalizer
    models: list
    bn_eps: float = 1e-5

    def __post_init__(self):
        if len(self.models) != self.partition.B:
            raise ConfigError(f"{len(self.models)} models for B={self.partition.B} zones")
        for m in self.models:
            if m.spec != self.spec:
                raise ConfigError("every zone model must share the bundle's layer spec")

    def encoder_payload(self, zone_id: int) -> np.ndarray:
        return self.models[zone_id - 1].encoder_payload()


def values_per_zone(spec: LayerSpec) -> int:
    """Stored scalars per zone: trainable parameters plus two running-statistic buffers per batch-norm."""
    return count_parameters(spec).total + 4 * spec.hidden


def encode_bundle(bundle: ModelBundle) -> bytes:
    spec = bundle.spec
    head = _ZCM_HEADER.pack(
        MODEL_MAGIC,
        FORMAT_VERSION,
        spec.n_t,
        spec.n_c,
        spec.codeword_len,
        spec.width_factor,
        ACTIVATIONS.index(spec.activation),
        bundle.partition.B,
        values_per_zone(spec),
    )
    parts = [
        head,
        np.asarray(bundle.partition.centroids, dtype="<f8").tobytes(),
        np.array([bundle.normalizer.scale, bundle.bn_eps], dtype="<f8").tobytes(),
    ]
    layout = param_layout(spec)
    for m in bundle.models:
        parts += [np.ascontiguousarray(m.tensors[name], dtype="<f8").tobytes() for name, _, _ in layout]
    return b"".join(parts)


def decode_bundle(buf: bytes) -> ModelBundle:
    buf = memoryview(buf)
    hs = _ZCM_HEADER.size
    if len(buf) < hs:
        raise TruncatedFileError(hs, len(buf), offset=len(buf))
    magic, version, n_t, n_c, L, beta, act, B, per_zone = _ZCM_HEADER.unpack_from(buf)
    if magic != MODEL_MAGIC:
        raise BadMagicError(f"bad magic {bytes(magic)!r}, expected {MODEL_MAGIC!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported ZCM1 version {version}", offset=4)
    if act >= len(ACTIVATIONS):
        raise CorruptBundleError(f"unknown activation tag {act}", offset=24)
    if B < 1:
        raise CorruptBundleError("bundle declares no zones", offset=28)
    try:
        spec = LayerSpec(n_t, n_c, L, beta, ACTIVATIONS[act])
    except ConfigError as exc:
        raise CorruptBundleError(f"invalid layer spec in header: {exc}", offset=8) from None
    want = values_per_zone(spec)
    if per_zone != want:
        raise CorruptBundleError(f"header stores {per_zone} values per zone, the layer dimensions imply {want}", offset=32)
    expected = hs + 16 * B + 16 + 8 * B * want
    if len(buf) < expected:
        raise TruncatedFileError(expected, len(buf), offset=len(buf))
    if len(buf) > expected:
        raise CorruptBundleError(f"{len(buf) - expected} trailing bytes", offset=expected)

    off = hs
    centroids = np.frombuffer(buf, "<f8", 2 * B, off).reshape(B, 2).copy()
    off += 16 * B
    scale, bn_eps = np.frombuffer(buf, "<f8", 2, off)
    off += 16
    try:
        partition = ZonePartition(centroids)
        normalizer = Normalizer(float(scale))
    except ZoneCSIError as exc:
        raise CorruptBundleError(f"invalid partition or normalizer: {exc}", offset=hs) from None
    if not (np.isfinite(bn_eps) and bn_eps > 0):
        raise CorruptBundleError(f"batch-norm epsilon must be positive, got {bn_eps}", offset=hs + 16 * B + 8)
    layout = param_layout(spec)
    models = []
    for b in range(B):
        start = off
        tensors = {}
        for name, shape, _ in layout:
            n = int(np.prod(shape))
            tensors[name] = np.frombuffer(buf, "<f8", n, off).reshape(shape).astype(np.float64)
            off += 8 * n
        m = ModelParams(spec, tensors, float(bn_eps))
        try:
            m.validate()
        except ZoneCSIError as exc:
            raise CorruptBundleError(f"zone {b + 1}: {exc}", offset=start) from None
        models.append(m)
    return ModelBundle(spec, partition, normalizer, models, float(bn_eps))


def save_model(path, bundle: ModelBundle):
    Path(path).write_bytes(encode_bundle(bundle))


def load_model(path) -> ModelBundle:
    return decode_bundle(Path(path).read_bytes())


# CSV interchange


def read_channel_csv(path, n_t: int, num_subcarriers: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows of ``x, y, z`` followed by 2*N_t*K floats in ZCD1 order.

    The channel floats are subcarrier-major with (real, imag) interleaved:
    ``re(h[k=0, n=0]), im(h[k=0, n=0]), re(h[k=0, n=1]), ...``.
    """
    width = 3 + 2 * n_t * num_subcarriers
    rows = []
    with open(path, newline="") as f:
        for line_no, row in enumerate(csv.reader(f), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != width:
                raise DataError(f"line {line_no}: expected {width} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DataError(f"line {line_no}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no samples")
    a = np.asarray(rows)
    if not np.all(np.isfinite(a)):
        raise DataError(f"{path}: non-finite values")
    pairs = a[:, 3:].reshape(len(a), num_subcarriers, n_t, 2)
    h = (pairs[..., 0] + 1j * pairs[..., 1]).transpose(0, 2, 1)
    return a[:, :3], np.ascontiguousarray(h)


def read_channel_npz(path) -> tuple[np.ndarray, np.ndarray]:
    """NumPy archive with ``positions`` (U, 3) and complex ``channels`` (U, N_t, K)."""
    try:
        with np.load(path, allow_pickle=False) as z:
            pos = np.asarray(z["positions"], dtype=float)
            h = np.asarray(z["channels"])
    except KeyError as exc:
        raise DataError(f"{path}: missing array {exc}") from None
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None
    if h.ndim != 3 or len(h) == 0 or pos.shape != (len(h), 3):
        raise DataError(f"{path}: need positions (U, 3) and channels (U, N_t, K), got {pos.shape} and {h.shape}")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(h))):
        raise DataError(f"{path}: non-finite values")
    return pos, h.astype(np.complex128)


def write_trajectory_csv(path, trajectory, zones):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("time", "x", "y", "zone"))
        for t, (x, y), z in zip(trajectory.times, trajectory.positions, zones):
            w.writerow((f"{t:.6f}", f"{x:.6f}", f"{y:.6f}", int(z)))
