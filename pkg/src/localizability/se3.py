"""Rigid transforms, Euler-angle poses and pose perturbation sampling.

Angles are radians everywhere except the JSON form of a pose and
:class:`PerturbationSigmas`, which follow the degree-based tables used to
configure the sampling.

The Euler convention is intrinsic ZYX: ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GIMBAL_EPS = 1e-6
_ORTHO_DRIFT = 1e-12


def wrap_angle(a):
    """Map angles onto (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if w.ndim == 0 else w


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_rotation(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Closed-form ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def rotation_to_euler(R: np.ndarray) -> tuple[float, float, float, bool]:
    """Return ``(roll, pitch, yaw, gimbal_locked)`` for a rotation matrix.

    At gimbal lock the coupled angle goes entirely to yaw and roll is 0.
    """
    sp = -R[2, 0]
    pitch = float(np.arcsin(np.clip(sp, -1.0, 1.0)))
    cp = np.hypot(R[0, 0], R[1, 0])
    if cp < GIMBAL_EPS:
        # R = Rz(yaw) Ry(+-pi/2) with roll folded into yaw
        yaw = float(np.arctan2(-R[0, 1], R[1, 1]))
        return 0.0, pitch, yaw, True
    roll = float(np.arctan2(R[2, 1], R[2, 2]))
    yaw = float(np.arctan2(R[1, 0], R[0, 0]))
    pitch = float(np.arctan2(sp, cp))
    return roll, pitch, yaw, False


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    Q = u @ vt
    if np.linalg.det(Q) < 0:
        u[:, -1] *= -1
        Q = u @ vt
    return Q


@dataclass(frozen=True)
class RigidTransform:
    """Element of SE(3) acting as ``p -> rotation @ p + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "RigidTransform":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an ``(n, 3)`` array (or a single 3-vector)."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def apply_direction(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        ortho = np.max(np.abs(R.T @ R - np.eye(3))) < tol
        return bool(ortho and np.linalg.det(R) > 0 and np.all(np.isfinite(self.translation)))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a @ b``: apply ``b`` first, then ``a``."""
    R = a.rotation @ b.rotation
    if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_DRIFT:
        R = _orthonormalize(R)
    return RigidTransform(R, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    return t.inverse()


@dataclass(frozen=True)
class Pose6:
    """Translation in meters plus roll/pitch/yaw in radians."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    @classmethod
    def from_array(cls, v) -> "Pose6":
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(*(float(c) for c in v))

    @classmethod
    def from_degrees(cls, x, y, z, roll_deg, pitch_deg, yaw_deg) -> "Pose6":
        return cls(x, y, z, *np.deg2rad([roll_deg, pitch_deg, yaw_deg]).tolist())

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.roll, self.pitch, self.yaw])

    def normalized(self) -> "Pose6":
        return Pose6(self.x, self.y, self.z, wrap_angle(self.roll),
                     self.pitch, wrap_angle(self.yaw))

    def to_json(self) -> dict:
        return {
            "x": self.x, "y": self.y, "z": self.z,
            "roll_deg": float(np.rad2deg(self.roll)),
            "pitch_deg": float(np.rad2deg(self.pitch)),
            "yaw_deg": float(np.rad2deg(self.yaw)),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Pose6":
        return cls.from_degrees(
            float(d.get("x", 0.0)), float(d.get("y", 0.0)), float(d.get("z", 0.0)),
            float(d.get("roll_deg", 0.0)), float(d.get("pitch_deg", 0.0)),
            float(d.get("yaw_deg", 0.0)),
        )


def from_euler_pose(p: Pose6) -> RigidTransform:
    return RigidTransform(euler_to_rotation(p.roll, p.pitch, p.yaw), [p.x, p.y, p.z])


def to_euler_pose(t: RigidTransform, *, with_flag: bool = False):
    """Project a transform to ``Pose6``.

    With ``with_flag=True`` returns ``(pose, gimbal_locked)``.
    """
    roll, pitch, yaw, locked = rotation_to_euler(t.rotation)
    pose = Pose6(*(float(c) for c in t.translation), roll, pitch, yaw)
    return (pose, locked) if with_flag else pose


def pose_difference(estimate: RigidTransform, truth: RigidTransform) -> np.ndarray:
    """Signed 6-vector of ``estimate^-1 @ truth`` with angles in (-pi, pi]."""
    v = to_euler_pose(compose(estimate.inverse(), truth)).as_array()
    v[3:] = wrap_angle(v[3:])
    return v


@dataclass(frozen=True)
class PerturbationSigmas:
    """Per-axis standard deviations: meters for x/y/z, degrees for angles."""

    x: float = 0.1
    y: float = 0.1
    z: float = 0.1
    roll_deg: float = 5.0
    pitch_deg: float = 5.0
    yaw_deg: float = 10.0

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.roll_deg, self.pitch_deg, self.yaw_deg)
        if not all(np.isfinite(v) and v > 0 for v in vals):
            raise ValueError(f"perturbation sigmas must be strictly positive, got {vals}")

    def as_internal(self) -> np.ndarray:
        """Sigmas as a 6-vector in meters and radians."""
        return np.array([self.x, self.y, self.z,
                         *np.deg2rad([self.roll_deg, self.pitch_deg, self.yaw_deg])])

    def to_json(self) -> dict:
        return {"x": self.x, "y": self.y, "z": self.z, "roll_deg": self.roll_deg,
                "pitch_deg": self.pitch_deg, "yaw_deg": self.yaw_deg}


def sample_perturbation(sigmas: PerturbationSigmas, rng: np.random.Generator) -> Pose6:
    """Independent zero-mean Gaussian draw per axis."""
    return Pose6.from_array(rng.normal(0.0, 1.0, 6) * sigmas.as_internal())


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Generator for a sub-stream identified by integer keys under ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))
