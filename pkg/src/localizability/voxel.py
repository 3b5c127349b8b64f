"""Random subsampling and sparse voxel quantization of point clouds."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_POINTS = 4000
DEFAULT_VOXEL_SIZE = 0.2
FEATURE_MODES = ("count", "constant")


@dataclass(frozen=True)
class SparseVoxelGrid:
    """Occupied voxels in lexicographic coordinate order with per-voxel features."""

    voxel_size: float
    coords: np.ndarray  # (m, 3) int64
    features: np.ndarray  # (m, c) float64

    def __len__(self):
        return len(self.coords)

    @property
    def counts(self) -> np.ndarray:
        return self.features[:, 0]


def downsample_random(cloud, n: int = DEFAULT_POINTS, rng: np.random.Generator | None = None):
    """Uniform sample of ``n`` points without replacement; small clouds pass through."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cloud = np.asarray(cloud)
    if len(cloud) <= n:
        return cloud
    rng = rng if rng is not None else np.random.default_rng(0)
    idx = np.sort(rng.choice(len(cloud), size=n, replace=False))
    return cloud[idx]


def voxel_quantize(cloud, voxel_size: float = DEFAULT_VOXEL_SIZE,
                   features: str = "count") -> SparseVoxelGrid:
    if voxel_size <= 0:
        raise ValueError("voxel_size must be > 0")
    if features not in FEATURE_MODES:
        raise ValueError(f"features must be one of {FEATURE_MODES}")
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    keys = np.floor(pts / voxel_size).astype(np.int64)
    coords, counts = np.unique(keys, axis=0, return_counts=True)
    coords = coords.reshape(-1, 3)
    feat = counts.astype(float)[:, None]
    if features == "constant":
        feat = np.ones_like(feat)
    return SparseVoxelGrid(float(voxel_size), coords, feat)


def prepare_input(cloud, rng: np.random.Generator, n: int = DEFAULT_POINTS,
                  voxel_size: float = DEFAULT_VOXEL_SIZE, features: str = "count") -> SparseVoxelGrid:
    """Subsample then quantize, as done for training and inference."""
    return voxel_quantize(downsample_random(cloud, n, rng), voxel_size, features)
