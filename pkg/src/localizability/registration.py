"""Point-to-plane ICP and the eigenvalue degeneracy baseline.

The Gauss-Newton state is the small-angle 6-vector ``(x, y, z, roll, pitch,
yaw)`` applied on the left of the current estimate, so Hessian axes line up
with the per-axis localizability directions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .se3 import Pose6, RigidTransform, compose, from_euler_pose, to_euler_pose

AXES = ("x", "y", "z", "roll", "pitch", "yaw")
PINV_RELATIVE_CUTOFF = 1e-9


class ICPError(RuntimeError):
    pass


class NoCorrespondencesError(ICPError):
    """Every source point fell outside the correspondence gate."""


class TooFewPointsError(ValueError):
    pass


class NearestNeighborIndex:
    """Exact Euclidean nearest-neighbour queries over a fixed cloud."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=float)
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def nearest(self, queries, max_distance=np.inf):
        """``(distance, index)``; index is -1 where nothing lies within ``max_distance``."""
        d, i = self._tree.query(np.asarray(queries, dtype=float), k=1,
                                distance_upper_bound=max_distance)
        miss = ~np.isfinite(d)
        i = np.where(miss, -1, i)
        return d, i

    def knn(self, queries, k):
        d, i = self._tree.query(np.asarray(queries, dtype=float), k=k)
        return d.reshape(len(d), k), i.reshape(len(i), k)


def estimate_normals(cloud, k: int = 10, index: NearestNeighborIndex | None = None):
    """Unit normals from k-NN covariances, oriented toward the sensor origin.

    Returns ``(normals, valid)``; neighbourhoods whose covariance has rank < 2
    are flagged invalid.
    """
    pts = np.asarray(cloud, dtype=float)
    if k < 3:
        raise ValueError("k must be >= 3")
    if len(pts) < k:
        raise TooFewPointsError(f"need at least k={k} points for normals, got {len(pts)}")
    index = index or NearestNeighborIndex(pts)
    _, nn = index.knn(pts, k)
    nb = pts[nn]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb) / k
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0]
    flip = np.einsum("ij,ij->i", normals, -pts) < 0
    normals[flip] *= -1.0
    valid = w[:, 1] > 1e-9 * np.maximum(w[:, 2], np.finfo(float).tiny)
    return normals, valid


@dataclass(frozen=True)
class ICPConfig:
    max_iterations: int = 30
    max_correspondence_distance: float = 2.0
    translation_tolerance: float = 1e-4
    rotation_tolerance: float = 1e-4
    normal_neighbors: int = 20
    # residuals beyond this many robust sigmas (1.4826 * MAD) are dropped; None keeps all
    outlier_mad_factor: float | None = None
    # per-eigendirection cap on a single Gauss-Newton step; None disables
    max_step_translation: float | None = 0.015
    max_step_rotation: float | None = float(np.deg2rad(1.0))
    # pairs whose source and target normals differ by more than this are dropped; None keeps all
    max_normal_angle: float | None = float(np.deg2rad(45.0))

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if min(self.max_correspondence_distance, self.translation_tolerance,
               self.rotation_tolerance) <= 0:
            raise ValueError("distances and tolerances must be > 0")
        if self.normal_neighbors < 3:
            raise ValueError("normal_neighbors must be >= 3")
        for v in (self.outlier_mad_factor, self.max_step_translation, self.max_step_rotation,
                  self.max_normal_angle):
            if v is not None and not v > 0:
                raise ValueError("outlier, step and normal limits must be > 0 or None")

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ICPResult:
    estimate: RigidTransform
    converged: bool
    iterations: int
    rms_residual: float
    hessian: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    correspondences: int = 0
    # (cost before, cost after) of each accepted step, same correspondences
    cost_history: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "estimate": to_euler_pose(self.estimate).to_json(),
            "converged": self.converged,
            "iterations": self.iterations,
            "rms_residual": self.rms_residual,
            "eigenvalues": self.eigenvalues.tolist(),
            "correspondences": self.correspondences,
        }


@dataclass
class PreparedTarget:
    """Target cloud with its normals and search index, reusable across registrations."""

    points: np.ndarray
    normals: np.ndarray
    valid: np.ndarray
    index: NearestNeighborIndex

    @classmethod
    def build(cls, cloud, k: int = 10, normals=None) -> "PreparedTarget":
        pts = np.asarray(cloud, dtype=float)
        index = NearestNeighborIndex(pts)
        if normals is None:
            normals, valid = estimate_normals(pts, k, index)
        else:
            normals = np.asarray(normals, dtype=float)
            valid = np.ones(len(pts), dtype=bool)
        return cls(pts, normals, valid, index)


def _linearize(p, q, n):
    r = np.einsum("ij,ij->i", n, p - q)
    J = np.hstack([n, np.cross(p, n)])
    return r, J


def solve_truncated(H, g):
    """Minimum-norm solution of ``H x = -g`` dropping near-null eigendirections."""
    w, V = np.linalg.eigh(H)
    wmax = w.max() if len(w) else 0.0
    if wmax <= 0:
        return np.zeros(len(g)), w, V
    keep = w >= PINV_RELATIVE_CUTOFF * wmax
    coef = (V[:, keep].T @ g) / w[keep]
    return -(V[:, keep] @ coef), w, V


def clip_step(delta, g, w, V, max_translation, max_rotation):
    """Rebuild the step eigendirection by eigendirection, shrinking each
    direction's contribution to at most the given translation and rotation."""
    wmax = w.max() if len(w) else 0.0
    if wmax <= 0:
        return delta
    keep = w >= PINV_RELATIVE_CUTOFF * wmax
    coef = -(V[:, keep].T @ g) / w[keep]
    parts = V[:, keep] * coef
    tn = np.linalg.norm(parts[:3], axis=0)
    rn = np.linalg.norm(parts[3:], axis=0)
    s = np.ones(len(coef))
    if max_translation is not None:
        s = np.minimum(s, max_translation / np.maximum(tn, 1e-300))
    if max_rotation is not None:
        s = np.minimum(s, max_rotation / np.maximum(rn, 1e-300))
    return parts @ s


def icp_point_to_plane(source, target, config: ICPConfig = ICPConfig(),
                       initial_guess: RigidTransform | None = None,
                       target_normals=None) -> ICPResult:
    """Register ``source`` onto ``target``; the estimate maps source into the target frame.

    ``target`` may be a :class:`PreparedTarget` or a raw cloud (normals are then
    estimated unless ``target_normals`` is given).
    """
    if not isinstance(target, PreparedTarget):
        target = PreparedTarget.build(target, config.normal_neighbors, target_normals)
    src = np.asarray(source, dtype=float)
    if len(src) < 6 or int(target.valid.sum()) < 6:
        raise TooFewPointsError("both clouds need at least 6 valid points")
    T = initial_guess or RigidTransform.identity()
    src_normals = None
    if config.max_normal_angle is not None and len(src) >= config.normal_neighbors:
        src_normals, src_valid = estimate_normals(src, config.normal_neighbors)
        min_cos = np.cos(config.max_normal_angle)
    converged = False
    history = []
    H = np.zeros((6, 6))
    w, V = np.zeros(6), np.eye(6)
    rms = np.nan
    n_corr = 0
    it = 0
    for it in range(1, config.max_iterations + 1):
        p_all = T.apply(src)
        _, idx = target.index.nearest(p_all, config.max_correspondence_distance)
        m = idx >= 0
        m[m] = target.valid[idx[m]]
        if src_normals is not None:
            # sign-free: both sets face their own sensor, which may sit on either side
            cos = np.abs(np.einsum("ij,ij->i", src_normals[m] @ T.rotation.T, target.normals[idx[m]]))
            m[m] = src_valid[m] & (cos >= min_cos)
        if not m.any():
            raise NoCorrespondencesError(
                f"no correspondences within {config.max_correspondence_distance} m")
        p, q, n = p_all[m], target.points[idx[m]], target.normals[idx[m]]
        n_corr = int(m.sum())
        r, J = _linearize(p, q, n)
        if config.outlier_mad_factor is not None:
            scale = 1.4826 * np.median(np.abs(r))
            ok = np.abs(r) <= max(config.outlier_mad_factor * scale, 1e-3)
            if ok.sum() >= 6:
                p, q, n, r, J = p[ok], q[ok], n[ok], r[ok], J[ok]
        H = J.T @ J
        g = J.T @ r
        delta, w, V = solve_truncated(H, g)
        if config.max_step_translation is not None or config.max_step_rotation is not None:
            delta = clip_step(delta, g, w, V, config.max_step_translation,
                              config.max_step_rotation)
        cost0 = float(r @ r)
        rms = np.sqrt(cost0 / len(r))
        # backtrack if the nonlinear update does not lower the cost
        for _ in range(20):
            dT = from_euler_pose(Pose6.from_array(delta))
            moved = dT.apply(p)
            cost1 = float(np.sum(np.einsum("ij,ij->i", n, moved - q) ** 2))
            if cost1 <= cost0 + 1e-12 * max(cost0, 1.0):
                break
            delta = delta * 0.5
        else:
            converged = True
            break
        history.append((cost0, cost1))
        T = compose(dT, T)
        angle = np.arccos(np.clip((np.trace(dT.rotation) - 1.0) / 2.0, -1.0, 1.0))
        if np.linalg.norm(delta[:3]) < config.translation_tolerance and angle < config.rotation_tolerance:
            converged = True
            break
    H = 0.5 * (H + H.T)
    return ICPResult(T, converged, it, float(rms), H, w, V, n_corr, history)


def eigen_flags(eigenvalues, eigenvectors, eigen_threshold: float) -> np.ndarray:
    """Per-axis flags: 1 where the eigenpair most aligned with that axis is below threshold.

    For axis ``i`` the eigenvector with the largest ``|v[i]|`` is chosen; ties
    go to the smaller eigenvalue (eigenvalues come sorted ascending).
    """
    pick = np.argmax(np.abs(np.asarray(eigenvectors)), axis=1)
    return (np.asarray(eigenvalues)[pick] < eigen_threshold).astype(np.int64)


def eigen_degeneracy(result: ICPResult, eigen_threshold: float) -> np.ndarray:
    return eigen_flags(result.eigenvalues, result.eigenvectors, eigen_threshold)


def hessian_at(cloud, normals=None, k: int = 10):
    """Gauss-Newton Hessian of registering a cloud onto itself at identity."""
    tgt = PreparedTarget.build(cloud, k, normals)
    p = tgt.points[tgt.valid]
    _, J = _linearize(p, p, tgt.normals[tgt.valid])
    H = J.T @ J
    return 0.5 * (H + H.T)
