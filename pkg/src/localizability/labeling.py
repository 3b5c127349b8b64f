"""Monte Carlo ground truth: expected registration error and binary labels.

Each child scan is ray cast at a Gaussian perturbation of the parent pose,
registered back onto the parent scan with point-to-plane ICP, and the
absolute pose error is averaged over all children.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .environments import EnvironmentSpec
from .lidar import SensorModel, capture_scan
from .registration import (ICPConfig, NoCorrespondencesError, PreparedTarget,
                           TooFewPointsError, icp_point_to_plane)
from .se3 import (PerturbationSigmas, RigidTransform, compose, derive_rng,
                  from_euler_pose, pose_difference, sample_perturbation)

log = logging.getLogger(__name__)

INITIAL_GUESS_MODES = ("identity", "truth")


class DegenerateParentError(ValueError):
    """The parent scan has too few points to register against."""


@dataclass(frozen=True)
class MonteCarloParams:
    samples: int = 200
    sigmas: PerturbationSigmas = field(default_factory=PerturbationSigmas)
    initial_guess: str = "identity"

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("Monte Carlo sample count must be >= 1")
        if self.initial_guess not in INITIAL_GUESS_MODES:
            raise ValueError(f"initial_guess must be one of {INITIAL_GUESS_MODES}")

    def to_json(self) -> dict:
        return {"samples": self.samples, "sigmas": self.sigmas.to_json(),
                "initial_guess": self.initial_guess}

    @classmethod
    def from_json(cls, d: dict) -> "MonteCarloParams":
        return cls(int(d.get("samples", 200)), PerturbationSigmas(**d.get("sigmas", {})),
                   d.get("initial_guess", "identity"))


@dataclass(frozen=True)
class LabelThresholds:
    """Per-axis error thresholds in meters (x, y, z) and degrees (roll, pitch, yaw)."""

    x: float = 0.1
    y: float = 0.1
    z: float = 0.1
    roll_deg: float = 2.0
    pitch_deg: float = 2.0
    yaw_deg: float = 2.0

    def __post_init__(self):
        if not all(v > 0 for v in self.as_config()):
            raise ValueError("label thresholds must be strictly positive")

    def as_config(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.roll_deg, self.pitch_deg, self.yaw_deg])

    def as_internal(self) -> np.ndarray:
        v = self.as_config()
        v[3:] = np.deg2rad(v[3:])
        return v

    def to_json(self) -> dict:
        return dict(zip(("x", "y", "z", "roll_deg", "pitch_deg", "yaw_deg"),
                        self.as_config().tolist()))


@dataclass
class ChildResult:
    index: int
    perturbation: np.ndarray  # signed 6-vector, m / rad
    error: np.ndarray  # |pose difference|, m / rad
    converged: bool
    iterations: int
    failed: bool
    points: int
    eigenvalues: np.ndarray | None = None
    icp: dict | None = None  # ICPResult.to_json() for debugging dumps

    def to_json(self) -> dict:
        return {"index": self.index, "perturbation": self.perturbation.tolist(),
                "error": self.error.tolist(), "converged": self.converged,
                "iterations": self.iterations, "failed": self.failed, "points": self.points,
                "icp": self.icp}


def localizability_from_error(e, thresholds: LabelThresholds = LabelThresholds()) -> np.ndarray:
    """Binary labels ``d_i = 1`` iff ``e_i`` strictly exceeds its threshold."""
    e = np.asarray(e, dtype=float)
    return (e > thresholds.as_internal()).astype(np.int64)


def _run_child(env, parent_pose, target, sensor, mc, icp, seed, j) -> ChildResult:
    rng = derive_rng(seed, 1, j)
    pert = sample_perturbation(mc.sigmas, rng)
    T_pc = from_euler_pose(pert)
    cloud = capture_scan(env, sensor, compose(parent_pose, T_pc), rng)
    guess = T_pc if mc.initial_guess == "truth" else RigidTransform.identity()
    signed = pert.as_array()
    try:
        res = icp_point_to_plane(cloud, target, icp, guess)
    except (NoCorrespondencesError, TooFewPointsError):
        # worst case: the registration recovered nothing of the offset
        err = np.abs(pose_difference(RigidTransform.identity(), T_pc))
        return ChildResult(j, signed, err, False, 0, True, len(cloud))
    err = np.abs(pose_difference(res.estimate, T_pc))
    return ChildResult(j, signed, err, res.converged, res.iterations, False, len(cloud),
                       res.eigenvalues, res.to_json())


def _run_children(args):
    env, parent_pose, target, sensor, mc, icp, seed, idx = args
    return [_run_child(env, parent_pose, target, sensor, mc, icp, seed, j) for j in idx]


def capture_parent(env, parent_pose: RigidTransform, sensor: SensorModel, seed: int) -> np.ndarray:
    return capture_scan(env, sensor, parent_pose, derive_rng(seed, 0))


def expected_registration_error(env: EnvironmentSpec, parent_pose: RigidTransform,
                                sensor: SensorModel, mc: MonteCarloParams = MonteCarloParams(),
                                icp: ICPConfig = ICPConfig(), seed: int = 0, *,
                                parent_cloud=None, jobs: int = 1):
    """Mean absolute pose error over ``mc.samples`` child registrations.

    Returns ``(e, children)`` where ``e`` is the 6-vector (m, m, m, rad, rad,
    rad) and ``children`` the per-child diagnostics in index order. Child
    ``j`` draws from a stream keyed by ``(seed, j)`` so the result does not
    depend on ``jobs``.
    """
    if parent_cloud is None:
        parent_cloud = capture_parent(env, parent_pose, sensor, seed)
    if len(parent_cloud) < max(6, icp.normal_neighbors):
        raise DegenerateParentError(f"parent scan has only {len(parent_cloud)} points")
    target = PreparedTarget.build(parent_cloud, icp.normal_neighbors)
    if int(target.valid.sum()) < 6:
        raise DegenerateParentError("parent scan has fewer than 6 points with valid normals")
    idx = np.arange(mc.samples)
    if jobs <= 1:
        children = _run_children((env, parent_pose, target, sensor, mc, icp, seed, idx))
    else:
        chunks = [c for c in np.array_split(idx, jobs) if len(c)]
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = ex.map(_run_children,
                           [(env, parent_pose, target, sensor, mc, icp, seed, c) for c in chunks])
            children = [c for part in parts for c in part]
    errors = np.stack([c.error for c in children])
    failed = sum(c.failed for c in children)
    if failed:
        log.debug("%d of %d child registrations had no correspondences", failed, len(children))
    return errors.mean(axis=0), children


def label_scan(env: EnvironmentSpec, parent_pose: RigidTransform, sensor: SensorModel,
               mc: MonteCarloParams = MonteCarloParams(), icp: ICPConfig = ICPConfig(),
               thresholds: LabelThresholds = LabelThresholds(), seed: int = 0, *,
               jobs: int = 1, return_children: bool = False):
    """Capture the parent scan and label it. Returns ``(cloud, d, e)``."""
    cloud = capture_parent(env, parent_pose, sensor, seed)
    e, children = expected_registration_error(env, parent_pose, sensor, mc, icp, seed,
                                              parent_cloud=cloud, jobs=jobs)
    d = localizability_from_error(e, thresholds)
    if return_children:
        return cloud, d, e, children
    return cloud, d, e
