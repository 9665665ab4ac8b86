"""Angular-delay transform, truncation/vectorization, and input scaling.

Real vector layout is fixed: ``[Re(H[:, :N_c]).ravel(), Im(H[:, :N_c]).ravel()]``
in row-major (antenna-major) order. Model files depend on it.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DegenerateInputError


@lru_cache(maxsize=16)
def _dft(n: int) -> np.ndarray:
    p = np.arange(n)
    F = np.exp(-2j * np.pi * np.outer(p, p) / n) / np.sqrt(n)
    F.setflags(write=False)
    return F


def unitary_dft(n: int) -> np.ndarray:
    """n x n DFT matrix with entries exp(-j 2 pi p q / n) / sqrt(n)."""
    if n < 1:
        raise ConfigError(f"DFT size must be >= 1, got {n}")
    return _dft(int(n)).copy()


def to_angular_delay(H_freq: np.ndarray) -> np.ndarray:
    """F_a H F_d^H. Accepts one (N_t, K) matrix or a stack (..., N_t, K)."""
    H_freq = np.asarray(H_freq)
    if H_freq.ndim < 2:
        raise ConfigError(f"expected an (N_t, K) matrix, got shape {H_freq.shape}")
    n_t, k = H_freq.shape[-2:]
    return _dft(n_t) @ H_freq @ _dft(k).conj().T


def from_angular_delay(H_ad: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_angular_delay`: F_a^H H F_d."""
    H_ad = np.asarray(H_ad)
    n_t, k = H_ad.shape[-2:]
    return _dft(n_t).conj().T @ H_ad @ _dft(k)


def truncate_and_vectorize(H_ad: np.ndarray, n_c: int) -> np.ndarray:
    """Keep the first ``n_c`` delay taps and flatten to real vectors of length 2 N_t n_c.

    Works on a single matrix or a stack; the leading axes are preserved.
    """
    H_ad = np.asarray(H_ad)
    k = H_ad.shape[-1]
    if not 1 <= n_c <= k:
        raise ConfigError(f"n_c must lie in [1, {k}], got {n_c}")
    kept = H_ad[..., :n_c]
    lead = kept.shape[:-2]
    return np.concatenate([kept.real.reshape(*lead, -1), kept.imag.reshape(*lead, -1)], axis=-1)


def devectorize_and_embed(v: np.ndarray, n_t: int, num_subcarriers: int) -> np.ndarray:
    """Right inverse of :func:`truncate_and_vectorize`; delay taps beyond n_c are zero."""
    v = np.asarray(v)
    half = v.shape[-1] // 2
    if v.shape[-1] != 2 * half or half % n_t:
        raise ConfigError(f"vector length {v.shape[-1]} is not 2 * {n_t} * n_c")
    n_c = half // n_t
    if n_c > num_subcarriers:
        raise ConfigError("n_c exceeds the number of subcarriers")
    lead = v.shape[:-1]
    kept = (v[..., :half] + 1j * v[..., half:]).reshape(*lead, n_t, n_c)
    out = np.zeros((*lead, n_t, num_subcarriers), dtype=np.complex128)
    out[..., :n_c] = kept
    return out


def energy_retention(H_ad: np.ndarray, n_c: int) -> np.ndarray:
    """Fraction of Frobenius energy in the first ``n_c`` delay taps (per matrix)."""
    e = np.abs(np.asarray(H_ad)) ** 2
    return e[..., :n_c].sum(axis=(-2, -1)) / e.sum(axis=(-2, -1))


def channels_to_vectors(channels: np.ndarray, n_c: int) -> np.ndarray:
    """Frequency-domain channel stack (U, N_t, K) -> real autoencoder inputs (U, 2 N_t n_c)."""
    return truncate_and_vectorize(to_angular_delay(channels), n_c)


@dataclass(frozen=True)
class Normalizer:
    scale: float

    def __post_init__(self):
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise DegenerateInputError(f"normalizer scale must be positive and finite, got {self.scale}")

    def apply(self, v):
        return np.asarray(v) / self.scale

    def invert(self, v):
        return np.asarray(v) * self.scale


NORMALIZER_METHODS = ("maxabs", "rms")


def fit_normalizer(vectors, method: str = "maxabs") -> Normalizer:
    """Global scaling fitted on the training set.

    ``maxabs`` maps the set into [-1, 1]. ``rms`` gives unit mean-square
    entries, which trains faster when a few near-site samples dominate the peak.
    """
    if method not in NORMALIZER_METHODS:
        raise ConfigError(f"normalizer method must be one of {NORMALIZER_METHODS}, got {method!r}")
    v = np.asarray(vectors, dtype=float)
    if v.size == 0:
        raise DegenerateInputError("cannot fit a normalizer on an empty set")
    if method == "maxabs":
        scale = float(np.abs(v).max())
    else:
        scale = float(np.sqrt(np.mean(v * v)))
    if scale == 0:
        raise DegenerateInputError("cannot fit a normalizer on an all-zero set")
    return Normalizer(scale)


def compression_rate(codeword_len: int, n_t: int, n_c: int) -> Fraction:
    if min(codeword_len, n_t, n_c) < 1:
        raise ConfigError("compression_rate needs positive L, N_t, N_c")
    return Fraction(codeword_len, 2 * n_t * n_c)
