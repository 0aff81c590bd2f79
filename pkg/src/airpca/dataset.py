"""Data ingestion, synthetic generation and uniform device partitioning."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import special_ortho_group

log = logging.getLogger(__name__)

IDX3_MAGIC = 0x00000803


@dataclass(frozen=True)
class DataMatrix:
    """Global dataset with samples stored as columns (D x L)."""

    samples: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=float)
        if x.ndim != 2:
            raise ValueError(f"samples must be a 2-D array, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples contain non-finite entries")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    @property
    def D(self) -> int:
        return self.samples.shape[0]

    @property
    def L(self) -> int:
        return self.samples.shape[1]

    def covariance(self) -> np.ndarray:
        """Uncentered scatter matrix X X^T."""
        return self.samples @ self.samples.T


@dataclass(frozen=True)
class DeviceShard:
    device_id: int
    local_data: np.ndarray
    covariance: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.local_data.shape[1]


def load_mnist_idx(path, max_samples: int, seed=None) -> DataMatrix:
    """Read an IDX3 image file into a (784 x L) matrix with pixels in [0, 1].

    Images are flattened row-major. The first ``max_samples`` images are
    taken unless ``seed`` is given, in which case a random subset is drawn.
    """
    if max_samples <= 0:
        raise ValueError("max_samples must be positive; an empty dataset is not usable")
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ValueError(f"{path}: too short for an IDX3 header")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX3_MAGIC:
        raise ValueError(f"{path}: bad IDX3 magic 0x{magic:08x} (expected 0x{IDX3_MAGIC:08x})")
    expected = 16 + n * rows * cols
    if len(raw) < expected:
        raise ValueError(f"{path}: truncated payload ({len(raw)} < {expected} bytes)")
    if max_samples > n:
        log.warning("max_samples=%d exceeds %d images in %s; truncating", max_samples, n, path)
        max_samples = n
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16)
    images = pixels.reshape(n, rows * cols)
    if seed is None:
        idx = np.arange(max_samples)
    else:
        idx = np.sort(np.random.default_rng(seed).choice(n, size=max_samples, replace=False))
    return DataMatrix(images[idx].T.astype(float) / 255.0)


def synthesize_spectrum_dataset(D: int, L: int, spectrum, seed) -> DataMatrix:
    """Gaussian samples x = U diag(sqrt(spectrum)) g with a seeded random rotation U."""
    spectrum = np.asarray(spectrum, dtype=float)
    if spectrum.shape != (D,):
        raise ValueError(f"spectrum must have length D={D}, got {spectrum.shape}")
    if np.any(spectrum < 0):
        raise ValueError("spectrum entries must be non-negative")
    if np.any(np.diff(spectrum) > 0):
        raise ValueError("spectrum must be sorted in non-increasing order")
    rng = np.random.default_rng(seed)
    U = special_ortho_group.rvs(D, random_state=rng) if D > 1 else np.ones((1, 1))
    g = rng.standard_normal((D, L))
    return DataMatrix(U @ (np.sqrt(spectrum)[:, None] * g))


def center(data: DataMatrix) -> DataMatrix:
    """Subtract the sample mean (exploration only; the PCA objective is uncentered)."""
    x = data.samples
    return DataMatrix(x - x.mean(axis=1, keepdims=True))


def partition(data: DataMatrix, K: int, seed) -> list[DeviceShard]:
    """Shuffle samples and deal them into K equal shards; the remainder is dropped."""
    if K <= 0:
        raise ValueError(f"K must be positive, got {K}")
    if data.L < K:
        raise ValueError(f"need at least K={K} samples, got L={data.L}")
    ell0 = data.L // K
    perm = np.random.default_rng(seed).permutation(data.L)[: K * ell0]
    shards = []
    for k in range(K):
        xk = data.samples[:, perm[k * ell0 : (k + 1) * ell0]]
        xk.setflags(write=False)
        cov = xk @ xk.T
        cov.setflags(write=False)
        shards.append(DeviceShard(k, xk, cov))
    return shards


def merge_shards(shards: list[DeviceShard]) -> DataMatrix:
    """Trimmed global dataset, columns concatenated in device order."""
    return DataMatrix(np.concatenate([s.local_data for s in shards], axis=1))
