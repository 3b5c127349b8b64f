"""Spinning LiDAR model and the ``L3EPCD1`` point cloud file format."""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .environments import EnvironmentSpec, cast_rays
from .se3 import RigidTransform

CLOUD_MAGIC = b"L3EPCD1"


class CloudFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SensorModel:
    """Beams spread uniformly over a vertical field of view symmetric about the horizon."""

    beam_count: int
    vertical_fov: float  # degrees
    azimuth_steps: int = 900
    max_range: float = 100.0
    range_noise_sigma: float = 0.01
    name: str = "custom"

    def __post_init__(self):
        if self.beam_count < 1:
            raise ValueError("beam_count must be >= 1")
        if self.azimuth_steps < 4:
            raise ValueError("azimuth_steps must be >= 4")
        if self.max_range <= 0:
            raise ValueError("max_range must be > 0")
        if self.range_noise_sigma < 0:
            raise ValueError("range_noise_sigma must be >= 0")

    def replace(self, **changes) -> "SensorModel":
        d = asdict(self)
        d.update(changes)
        return SensorModel(**d)

    def to_json(self) -> dict:
        return asdict(self)

    def elevations(self) -> np.ndarray:
        if self.beam_count == 1:
            return np.zeros(1)
        half = np.deg2rad(self.vertical_fov) / 2.0
        return np.linspace(-half, half, self.beam_count)

    def ray_directions(self) -> np.ndarray:
        """Unit directions in the sensor frame, beam-major ordering."""
        el = self.elevations()[:, None]
        az = (2.0 * np.pi / self.azimuth_steps) * np.arange(self.azimuth_steps)[None, :]
        d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az),
                      np.broadcast_to(np.sin(el), (len(el), az.shape[1]))], axis=-1)
        return d.reshape(-1, 3)


_PRESETS = {
    "vlp16": dict(beam_count=16, vertical_fov=30.0, max_range=100.0),
    "os0_128": dict(beam_count=128, vertical_fov=90.0, max_range=50.0),
}


def preset(name: str, **overrides) -> SensorModel:
    """``vlp16`` (16 beams, 30 deg) or ``os0_128`` (128 beams, 90 deg)."""
    if name not in _PRESETS:
        raise KeyError(f"unknown sensor preset {name!r}; choose from {sorted(_PRESETS)}")
    return SensorModel(name=name, **{**_PRESETS[name], **overrides})


def capture_scan(env: EnvironmentSpec, sensor: SensorModel, pose: RigidTransform,
                 rng: np.random.Generator) -> np.ndarray:
    """Ray cast a scan from ``pose``; returns ``(n, 3)`` points in the sensor frame.

    Misses are dropped. Range noise is drawn for every ray (hit or not) so the
    random stream does not depend on the scene.
    """
    d_sensor = sensor.ray_directions()
    d_world = d_sensor @ pose.rotation.T
    dist, _ = cast_rays(env, pose.translation, d_world, sensor.max_range)
    noise = rng.normal(0.0, sensor.range_noise_sigma, len(dist)) if sensor.range_noise_sigma > 0 \
        else np.zeros(len(dist))
    r = dist + noise
    keep = np.isfinite(dist) & (r > 0)
    return d_sensor[keep] * r[keep, None]


def write_cloud(path, points) -> None:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(CLOUD_MAGIC)
        fh.write(struct.pack("<I", len(pts)))
        fh.write(pts.tobytes())


def read_cloud(path) -> np.ndarray:
    """Read an ``L3EPCD1`` file as float32 ``(n, 3)``."""
    path = Path(path)
    raw = path.read_bytes()
    m = len(CLOUD_MAGIC)
    if raw[:m] != CLOUD_MAGIC:
        raise CloudFormatError(f"{path}: not an L3EPCD1 cloud file")
    if len(raw) < m + 4:
        raise CloudFormatError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", raw[m:m + 4])
    if len(raw) != m + 4 + 12 * n:
        raise CloudFormatError(f"{path}: expected {n} points ({m + 4 + 12 * n} bytes), "
                               f"found {len(raw)} bytes")
    return np.frombuffer(raw, dtype="<f4", offset=m + 4).reshape(n, 3).astype(np.float32)
