"""Synthetic worlds: analytic primitives, triangle soups, ray casting and
collision checks.

All primitives are described in a local frame placed in the world by a
``pose``. Rooms and tunnels have their floor at local ``z = 0``; tunnels and
cylinders run along local ``x`` and are open-ended.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .se3 import Pose6, RigidTransform, from_euler_pose

T_MIN = 1e-6
MESH_MAGIC = b"L3EMESH1"

# parent pose sampling around path waypoints (m, m, m, deg, deg, deg)
PARENT_SIGMAS = (0.2, 0.2, 0.4, 15.0, 15.0, 180.0)
DEFAULT_CLEARANCE = 0.2


class EnvironmentFormatError(ValueError):
    """Environment file could not be parsed."""


class EnvironmentValidationError(ValueError):
    """Environment content violates an invariant."""


def _rect_hits(o, d, axis, coord, lo, hi):
    """Ray distances to an axis-aligned rectangle ``x[axis] = coord``.

    ``lo``/``hi`` bound the two remaining axes in increasing axis order.
    Returns ``inf`` for misses.
    """
    others = [a for a in range(3) if a != axis]
    da = d[:, axis]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t = (coord - o[:, axis]) / da
        t = np.where(np.abs(da) > 0, t, np.inf)
        p0 = o[:, others[0]] + t * d[:, others[0]]
        p1 = o[:, others[1]] + t * d[:, others[1]]
    ok = (t > T_MIN) & (p0 >= lo[0]) & (p0 <= hi[0]) & (p1 >= lo[1]) & (p1 <= hi[1])
    return np.where(ok, t, np.inf)


def _nearest_face(o, d, faces):
    """Pick the nearest of several rectangles; ``faces`` = (axis, coord, lo, hi)."""
    ts = np.stack([_rect_hits(o, d, *f) for f in faces], axis=1)
    which = np.argmin(ts, axis=1)
    t = ts[np.arange(len(ts)), which]
    normals = np.zeros((len(t), 3))
    for k, (axis, *_rest) in enumerate(faces):
        normals[which == k, axis] = 1.0
    return t, normals


@dataclass(frozen=True)
class Primitive:
    """Base class; subclasses implement the local-frame geometry."""

    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    kind = "primitive"
    interior = False

    # local-frame geometry -------------------------------------------------
    def _intersect_local(self, o, d):
        raise NotImplementedError

    def _distance_local(self, p):
        raise NotImplementedError

    def _contains_local(self, p):
        return np.ones(len(p), dtype=bool)

    # world-frame wrappers -------------------------------------------------
    def intersect(self, origins, directions):
        """Distances (``inf`` on miss) and world normals as authored."""
        R, t = self.pose.rotation, self.pose.translation
        o = (origins - t) @ R
        d = directions @ R
        dist, n = self._intersect_local(o, d)
        return dist, n @ R.T

    def distance(self, points):
        points = np.atleast_2d(points)
        return self._distance_local((points - self.pose.translation) @ self.pose.rotation)

    def contains(self, points):
        points = np.atleast_2d(points)
        return self._contains_local((points - self.pose.translation) @ self.pose.rotation)

    def params_json(self) -> dict:
        return {}


@dataclass(frozen=True)
class Plane(Primitive):
    """Rectangle ``z = 0`` of size ``extent`` centred at the local origin."""

    extent: tuple = (2000.0, 2000.0)
    kind = "plane"

    def _half(self):
        return np.asarray(self.extent, dtype=float) / 2.0

    def _intersect_local(self, o, d):
        h = self._half()
        t = _rect_hits(o, d, 2, 0.0, (-h[0], -h[1]), (h[0], h[1]))
        n = np.zeros((len(o), 3))
        n[:, 2] = 1.0
        return t, n

    def _distance_local(self, p):
        h = self._half()
        dx = np.maximum(np.abs(p[:, 0]) - h[0], 0.0)
        dy = np.maximum(np.abs(p[:, 1]) - h[1], 0.0)
        return np.sqrt(dx * dx + dy * dy + p[:, 2] ** 2)

    def params_json(self):
        return {"extent": list(self.extent)}


@dataclass(frozen=True)
class BoxRoom(Primitive):
    """Closed box, ``size = (W, L, H)``, x/y centred and floor at z = 0."""

    size: tuple = (8.0, 6.0, 3.0)
    kind = "box_room"
    interior = True

    def _faces(self):
        w, l, h = self.size[0] / 2.0, self.size[1] / 2.0, self.size[2]
        return [
            (0, -w, (-l, 0.0), (l, h)), (0, w, (-l, 0.0), (l, h)),
            (1, -l, (-w, 0.0), (w, h)), (1, l, (-w, 0.0), (w, h)),
            (2, 0.0, (-w, -l), (w, l)), (2, h, (-w, -l), (w, l)),
        ]

    def _intersect_local(self, o, d):
        return _nearest_face(o, d, self._faces())

    def _contains_local(self, p):
        w, l, h = self.size[0] / 2.0, self.size[1] / 2.0, self.size[2]
        return (np.abs(p[:, 0]) < w) & (np.abs(p[:, 1]) < l) & (p[:, 2] > 0) & (p[:, 2] < h)

    def _distance_local(self, p):
        w, l, h = self.size[0] / 2.0, self.size[1] / 2.0, self.size[2]
        inside = self._contains_local(p)
        d_in = np.min(np.stack([w - np.abs(p[:, 0]), l - np.abs(p[:, 1]),
                                p[:, 2], h - p[:, 2]], axis=1), axis=1)
        # outside: distance to the solid box equals distance to its surface
        q = np.stack([np.abs(p[:, 0]) - w, np.abs(p[:, 1]) - l,
                      np.abs(p[:, 2] - h / 2.0) - h / 2.0], axis=1)
        d_out = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        return np.where(inside, d_in, d_out)

    def params_json(self):
        return {"size": list(self.size)}


@dataclass(frozen=True)
class SquareTunnel(Primitive):
    """Open-ended rectangular tunnel along local x, floor at z = 0."""

    width: float = 10.0
    height: float = 5.0
    length: float = 200.0
    kind = "square_tunnel"
    interior = True

    def _faces(self):
        w, h, a = self.width / 2.0, self.height, self.length / 2.0
        return [
            (1, -w, (-a, 0.0), (a, h)), (1, w, (-a, 0.0), (a, h)),
            (2, 0.0, (-a, -w), (a, w)), (2, h, (-a, -w), (a, w)),
        ]

    def _intersect_local(self, o, d):
        return _nearest_face(o, d, self._faces())

    def _contains_local(self, p):
        return ((np.abs(p[:, 0]) < self.length / 2.0) & (np.abs(p[:, 1]) < self.width / 2.0)
                & (p[:, 2] > 0) & (p[:, 2] < self.height))

    def _distance_local(self, p):
        w, h, a = self.width / 2.0, self.height, self.length / 2.0
        ex = np.maximum(np.abs(p[:, 0]) - a, 0.0)
        dy = np.abs(np.abs(p[:, 1]) - w)
        dy_in = np.abs(p[:, 1]) <= w
        dz = np.abs(np.abs(p[:, 2] - h / 2.0) - h / 2.0)
        dz_in = np.abs(p[:, 2] - h / 2.0) <= h / 2.0
        # side walls span z in [0, h]; floor/ceiling span y in [-w, w]
        side = np.hypot(dy, np.where(dz_in, 0.0, dz))
        flat = np.hypot(dz, np.where(dy_in, 0.0, np.abs(np.abs(p[:, 1]) - w)))
        return np.hypot(np.minimum(side, flat), ex)

    def params_json(self):
        return {"width": self.width, "height": self.height, "length": self.length}


@dataclass(frozen=True)
class Cylinder(Primitive):
    """Open-ended circular tube of ``radius`` along local x, centred at origin."""

    radius: float = 3.0
    length: float = 200.0
    kind = "cylinder"
    interior = True

    def _intersect_local(self, o, d):
        r = self.radius
        a = d[:, 1] ** 2 + d[:, 2] ** 2
        b = 2.0 * (o[:, 1] * d[:, 1] + o[:, 2] * d[:, 2])
        c = o[:, 1] ** 2 + o[:, 2] ** 2 - r * r
        disc = b * b - 4.0 * a * c
        ok = (a > 0) & (disc >= 0)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        q = -0.5 * (b + np.where(b >= 0, sq, -sq))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = np.where(ok, q / a, np.inf)
            t2 = np.where(ok & (q != 0), c / q, np.inf)
        half = self.length / 2.0
        best = np.full(len(o), np.inf)
        for t in (t1, t2):
            x = o[:, 0] + t * d[:, 0]
            valid = np.isfinite(t) & (t > T_MIN) & (np.abs(x) <= half)
            best = np.where(valid & (t < best), t, best)
        hit = o + np.where(np.isfinite(best), best, 0.0)[:, None] * d
        n = np.zeros((len(o), 3))
        n[:, 1:] = hit[:, 1:] / r
        return best, n

    def _contains_local(self, p):
        return (np.abs(p[:, 0]) < self.length / 2.0) & (np.hypot(p[:, 1], p[:, 2]) < self.radius)

    def _distance_local(self, p):
        rho = np.hypot(p[:, 1], p[:, 2])
        ex = np.maximum(np.abs(p[:, 0]) - self.length / 2.0, 0.0)
        return np.hypot(np.abs(rho - self.radius), ex)

    def params_json(self):
        return {"radius": self.radius, "length": self.length}


# --------------------------------------------------------------------------
# triangle soups


def ray_triangle_distances(o, d, v0, e1, e2):
    """Moller-Trumbore for paired rays/triangles; ``inf`` on miss."""
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-15
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = o - v0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = np.einsum("ij,ij->i", d, qvec) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    ok &= (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > T_MIN)
    return np.where(ok, t, np.inf)


class BVH:
    """Bounding-volume hierarchy over triangles, binned SAH splits."""

    def __init__(self, triangles: np.ndarray, leaf_size: int = 4, bins: int = 12):
        tris = np.asarray(triangles, dtype=float)
        self.triangles = tris
        self.v0 = tris[:, 0]
        self.e1 = tris[:, 1] - tris[:, 0]
        self.e2 = tris[:, 2] - tris[:, 0]
        lo_t = tris.min(axis=1)
        hi_t = tris.max(axis=1)
        cen = tris.mean(axis=1)

        bmin, bmax, left, right, start, count = [], [], [], [], [], []
        order = np.arange(len(tris))
        # work items: (node id, index slice into order)
        stack = [(0, 0, len(tris))]
        bmin.append(None); bmax.append(None); left.append(-1); right.append(-1)
        start.append(0); count.append(0)
        while stack:
            node, s, e = stack.pop()
            idx = order[s:e]
            bmin[node] = lo_t[idx].min(axis=0)
            bmax[node] = hi_t[idx].max(axis=0)
            n = e - s
            split = None
            if n > leaf_size:
                split = self._sah_split(idx, cen, lo_t, hi_t, bins)
            if split is None:
                start[node], count[node] = s, n
                continue
            axis, value = split
            mask = cen[idx, axis] < value
            order[s:e] = np.concatenate([idx[mask], idx[~mask]])
            mid = s + int(mask.sum())
            for child_range in ((s, mid), (mid, e)):
                cid = len(bmin)
                bmin.append(None); bmax.append(None); left.append(-1); right.append(-1)
                start.append(0); count.append(0)
                if child_range[0] == s:
                    left[node] = cid
                else:
                    right[node] = cid
                stack.append((cid, *child_range))
        self.order = order
        self.bmin = np.array(bmin)
        self.bmax = np.array(bmax)
        self.left = np.array(left)
        self.right = np.array(right)
        self.start = np.array(start)
        self.count = np.array(count)

    @staticmethod
    def _sah_split(idx, cen, lo_t, hi_t, bins):
        c = cen[idx]
        cmin, cmax = c.min(axis=0), c.max(axis=0)
        axis = int(np.argmax(cmax - cmin))
        span = cmax[axis] - cmin[axis]
        if span <= 0:
            return None
        b = np.minimum(((c[:, axis] - cmin[axis]) / span * bins).astype(int), bins - 1)
        best_cost, best_k = np.inf, None
        lo, hi = lo_t[idx], hi_t[idx]

        def area(mn, mx):
            ext = np.maximum(mx - mn, 0.0)
            return 2.0 * (ext[0] * ext[1] + ext[1] * ext[2] + ext[0] * ext[2])

        for k in range(1, bins):
            m = b < k
            nl = int(m.sum())
            nr = len(idx) - nl
            if nl == 0 or nr == 0:
                continue
            cost = nl * area(lo[m].min(0), hi[m].max(0)) + nr * area(lo[~m].min(0), hi[~m].max(0))
            if cost < best_cost:
                best_cost, best_k = cost, k
        if best_k is None:
            return None
        return axis, cmin[axis] + span * best_k / bins

    def intersect(self, o, d, max_t=None):
        """Nearest hit per ray: ``(t, triangle index)``; ``inf`` / -1 on miss."""
        n = len(o)
        best_t = np.full(n, np.inf if max_t is None else float(max_t))
        best_tri = np.full(n, -1)
        with np.errstate(divide="ignore", invalid="ignore"):
            # +0.0 turns -0.0 components into +0.0 so the slab test's nan fix-up stays valid
            inv = 1.0 / (d + 0.0)
        rays = np.arange(n)
        nodes = np.zeros(n, dtype=int)
        while len(rays):
            oi, ii = o[rays], inv[rays]
            with np.errstate(invalid="ignore"):
                t0 = (self.bmin[nodes] - oi) * ii
                t1 = (self.bmax[nodes] - oi) * ii
            t0 = np.nan_to_num(t0, nan=-np.inf)
            t1 = np.nan_to_num(t1, nan=np.inf)
            tnear = np.minimum(t0, t1).max(axis=1)
            tfar = np.maximum(t0, t1).min(axis=1)
            keep = (tnear <= tfar) & (tfar >= T_MIN) & (tnear <= best_t[rays])
            rays, nodes = rays[keep], nodes[keep]
            leaf = self.left[nodes] < 0
            lr, ln = rays[leaf], nodes[leaf]
            if len(lr):
                cnt = self.count[ln]
                rep_r = np.repeat(lr, cnt)
                offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
                tri = self.order[np.repeat(self.start[ln], cnt) + offs]
                t = ray_triangle_distances(o[rep_r], d[rep_r], self.v0[tri], self.e1[tri], self.e2[tri])
                hit = t < best_t[rep_r]
                if hit.any():
                    rr, tt, tr = rep_r[hit], t[hit], tri[hit]
                    srt = np.lexsort((tr, tt, rr))
                    rr, tt, tr = rr[srt], tt[srt], tr[srt]
                    first = np.ones(len(rr), dtype=bool)
                    first[1:] = rr[1:] != rr[:-1]
                    rr, tt, tr = rr[first], tt[first], tr[first]
                    better = tt < best_t[rr]
                    best_t[rr[better]] = tt[better]
                    best_tri[rr[better]] = tr[better]
            ir, inn = rays[~leaf], nodes[~leaf]
            rays = np.concatenate([ir, ir])
            nodes = np.concatenate([self.left[inn], self.right[inn]])
        if max_t is not None:
            best_t[best_tri < 0] = np.inf
        return best_t, best_tri


def closest_points_on_triangles(p, tris):
    """Closest point on each triangle to point ``p`` (Ericson's region tests)."""
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
        out = a + ab * (vb * denom)[:, None] + ac * (vc * denom)[:, None]
        # edge regions, later assignments take precedence as in the scalar algorithm
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        out[m] = (b + (c - b) * w_bc[:, None])[m]
        w_ac = d2 / (d2 - d6)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        out[m] = (a + ac * w_ac[:, None])[m]
        w_ab = d1 / (d1 - d3)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        out[m] = (a + ab * w_ab[:, None])[m]
    out[(d6 >= 0) & (d5 <= d6)] = c[(d6 >= 0) & (d5 <= d6)]
    out[(d3 >= 0) & (d4 <= d3)] = b[(d3 >= 0) & (d4 <= d3)]
    out[(d1 <= 0) & (d2 <= 0)] = a[(d1 <= 0) & (d2 <= 0)]
    return out


@dataclass(frozen=True, eq=False)
class TriangleSoup(Primitive):
    """Indexed triangle mesh. Authored winding defines the front side.

    With ``interior=True`` a position counts as inside when at least three
    axis-aligned probe rays hit a front face and none hits a back face.
    """

    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    indices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    interior_flag: bool = False
    source_file: Optional[str] = None
    kind = "triangle_soup"

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        f = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "indices", f)
        object.__setattr__(self, "_bvh", None)

    @property
    def interior(self):
        return self.interior_flag

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.indices]

    @property
    def face_normals(self) -> np.ndarray:
        t = self.triangles
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @property
    def bvh(self) -> BVH:
        if self._bvh is None:
            object.__setattr__(self, "_bvh", BVH(self.triangles))
            object.__setattr__(self, "_normals", self.face_normals)
        return self._bvh

    def _intersect_local(self, o, d):
        t, tri = self.bvh.intersect(o, d)
        n = np.zeros((len(o), 3))
        hit = tri >= 0
        n[hit] = self._normals[tri[hit]]
        return t, n

    def _distance_local(self, p):
        tris = self.triangles
        return np.array([np.min(np.linalg.norm(closest_points_on_triangles(q, tris) - q, axis=1))
                         for q in p])

    def _contains_local(self, p):
        dirs = np.vstack([np.eye(3), -np.eye(3)])
        inside = np.zeros(len(p), dtype=bool)
        for i, q in enumerate(p):
            t, n = self._intersect_local(np.repeat(q[None], 6, axis=0), dirs)
            hit = np.isfinite(t)
            front = np.einsum("ij,ij->i", n, dirs) < 0
            inside[i] = (np.sum(hit & front) >= 3) and not np.any(hit & ~front)
        return inside

    def params_json(self):
        return {"file": self.source_file, "interior": self.interior_flag}


def read_mesh(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an ``L3EMESH1`` file: magic, u32 nv, u32 nf, f32 xyz, u32 ijk."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MESH_MAGIC:
        raise EnvironmentFormatError(f"{path}: bad mesh magic {raw[:8]!r}")
    if len(raw) < 16:
        raise EnvironmentFormatError(f"{path}: truncated mesh header")
    nv, nf = struct.unpack("<II", raw[8:16])
    need = 16 + 12 * nv + 12 * nf
    if len(raw) != need:
        raise EnvironmentFormatError(f"{path}: expected {need} bytes, found {len(raw)}")
    v = np.frombuffer(raw, dtype="<f4", count=3 * nv, offset=16).reshape(nv, 3)
    f = np.frombuffer(raw, dtype="<u4", count=3 * nf, offset=16 + 12 * nv).reshape(nf, 3)
    return v.astype(float), f.astype(np.int64)


def write_mesh(path, vertices, indices) -> None:
    v = np.asarray(vertices, dtype="<f4").reshape(-1, 3)
    f = np.asarray(indices, dtype="<u4").reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(MESH_MAGIC)
        fh.write(struct.pack("<II", len(v), len(f)))
        fh.write(v.tobytes())
        fh.write(f.tobytes())


# --------------------------------------------------------------------------
# environment


@dataclass(frozen=True)
class SamplingPath:
    waypoints: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=float).reshape(-1, 3)
        w.setflags(write=False)
        object.__setattr__(self, "waypoints", w)

    def __len__(self):
        return len(self.waypoints)


@dataclass(frozen=True)
class EnvironmentSpec:
    name: str
    primitives: tuple
    paths: tuple = ()
    metadata: dict = field(default_factory=dict)

    def interior_primitives(self):
        return [p for p in self.primitives if p.interior]


def cast_rays(env: EnvironmentSpec, origins, directions, max_range: float):
    """Vectorised nearest hits.

    Returns ``(distance, normal)`` with ``inf`` distance for misses and
    normals flipped to face the ray origin.
    """
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    origins = np.broadcast_to(np.asarray(origins, dtype=float), directions.shape)
    best = np.full(len(directions), np.inf)
    normals = np.zeros_like(directions)
    for prim in env.primitives:
        t, n = prim.intersect(origins, directions)
        closer = t < best
        best = np.where(closer, t, best)
        normals[closer] = n[closer]
    best[best > max_range] = np.inf
    flip = np.einsum("ij,ij->i", normals, directions) > 0
    normals[flip] *= -1.0
    return best, normals


def ray_cast(env: EnvironmentSpec, origin, direction, max_range: float):
    """Single ray. Returns ``(distance, unit normal)`` or ``None`` on a miss."""
    direction = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    if max_range <= 0:
        raise ValueError("max_range must be positive")
    t, n = cast_rays(env, np.asarray(origin, dtype=float)[None], direction[None], max_range)
    if not np.isfinite(t[0]):
        return None
    return float(t[0]), n[0]


def is_collision_free(env: EnvironmentSpec, position, clearance: float = DEFAULT_CLEARANCE) -> bool:
    if clearance < 0:
        raise ValueError("clearance must be >= 0")
    p = np.asarray(position, dtype=float).reshape(1, 3)
    for prim in env.interior_primitives():
        if not prim.contains(p)[0]:
            return False
    return all(prim.distance(p)[0] > clearance for prim in env.primitives)


def sample_parent_pose(path: SamplingPath, waypoint_index: int, rng: np.random.Generator,
                       sigmas: Sequence[float] = PARENT_SIGMAS) -> Pose6:
    """Gaussian pose around a waypoint; sigmas in (m, m, m, deg, deg, deg).

    Angles are returned as drawn, without wrapping.
    """
    if not 0 <= waypoint_index < len(path):
        raise IndexError(f"waypoint index {waypoint_index} out of range for path of {len(path)}")
    s = np.asarray(sigmas, dtype=float)
    s = np.concatenate([s[:3], np.deg2rad(s[3:])])
    draw = rng.normal(0.0, 1.0, 6) * s
    draw[:3] += path.waypoints[waypoint_index]
    return Pose6.from_array(draw)


def waypoint_pose(path: SamplingPath, waypoint_index: int) -> Pose6:
    """Level pose at a waypoint, heading along the path."""
    w = path.waypoints
    i = waypoint_index
    seg = w[i + 1] - w[i] if i + 1 < len(w) else w[i] - w[i - 1]
    return Pose6(*w[i], 0.0, 0.0, float(np.arctan2(seg[1], seg[0])))


# --------------------------------------------------------------------------
# loading

_KIND_ALIASES = {
    "plane": "plane", "box_room": "box_room", "box-room": "box_room", "room": "box_room",
    "square_tunnel": "square_tunnel", "square-tunnel": "square_tunnel",
    "cylinder": "cylinder", "triangle_soup": "triangle_soup", "triangle-soup": "triangle_soup",
}


def _positive(where, name, value):
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise EnvironmentValidationError(f"{where}: {name} must be a number, got {value!r}") from None
    if not np.isfinite(value) or value <= 0:
        raise EnvironmentValidationError(f"{where}: {name} must be finite and > 0, got {value}")
    return value


def _primitive_from_json(d: dict, i: int, base: Path) -> Primitive:
    if not isinstance(d, dict) or "kind" not in d:
        raise EnvironmentValidationError(f"primitives[{i}]: missing 'kind'")
    kind = _KIND_ALIASES.get(str(d["kind"]))
    where = f"primitives[{i}] ({d['kind']})"
    if kind is None:
        raise EnvironmentValidationError(f"{where}: unknown primitive kind")
    pose = from_euler_pose(Pose6.from_json(d.get("pose", {})))
    if kind == "plane":
        ext = d.get("extent", [2000.0, 2000.0])
        return Plane(pose, tuple(_positive(where, "extent", e) for e in ext))
    if kind == "box_room":
        size = d.get("size")
        if size is None or len(size) != 3:
            raise EnvironmentValidationError(f"{where}: size must be [W, L, H]")
        return BoxRoom(pose, tuple(_positive(where, "size", s) for s in size))
    if kind == "square_tunnel":
        return SquareTunnel(pose, _positive(where, "width", d.get("width")),
                            _positive(where, "height", d.get("height")),
                            _positive(where, "length", d.get("length")))
    if kind == "cylinder":
        return Cylinder(pose, _positive(where, "radius", d.get("radius")),
                        _positive(where, "length", d.get("length")))
    # triangle soup: inline arrays or a binary mesh file
    if "file" in d:
        mesh_path = base / d["file"]
        if not mesh_path.exists():
            raise EnvironmentValidationError(f"{where}: mesh file {mesh_path} not found")
        v, f = read_mesh(mesh_path)
        src = str(d["file"])
    else:
        v = np.asarray(d.get("vertices", []), dtype=float).reshape(-1, 3)
        f = np.asarray(d.get("indices", []), dtype=np.int64).reshape(-1, 3)
        src = None
    if len(f) == 0:
        raise EnvironmentValidationError(f"{where}: no triangles")
    if f.min() < 0 or f.max() >= len(v):
        raise EnvironmentValidationError(f"{where}: triangle index out of range")
    tris = v[f]
    area = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    if np.any(area <= 1e-12):
        raise EnvironmentValidationError(
            f"{where}: degenerate triangle {int(np.argmin(area))} (area {area.min():.3g} m^2)")
    return TriangleSoup(pose, v, f, bool(d.get("interior", False)), src)


def environment_from_json(data: dict, base: Path = Path("."), source: str = "<memory>") -> EnvironmentSpec:
    if not isinstance(data, dict):
        raise EnvironmentValidationError(f"{source}: top level must be an object")
    prims = data.get("primitives") or []
    if not prims:
        raise EnvironmentValidationError(f"{source}: at least one primitive is required")
    primitives = tuple(_primitive_from_json(p, i, base) for i, p in enumerate(prims))
    paths = []
    for i, p in enumerate(data.get("paths", [])):
        w = np.asarray(p.get("waypoints", []), dtype=float)
        if w.ndim != 2 or w.shape[1] != 3 or len(w) < 2:
            raise EnvironmentValidationError(f"{source}: paths[{i}] needs >= 2 xyz waypoints")
        if not np.all(np.isfinite(w)):
            raise EnvironmentValidationError(f"{source}: paths[{i}] has non-finite waypoints")
        if np.any(np.all(np.diff(w, axis=0) == 0, axis=1)):
            raise EnvironmentValidationError(f"{source}: paths[{i}] repeats a waypoint")
        paths.append(SamplingPath(w))
    return EnvironmentSpec(str(data.get("name", Path(source).stem)), primitives, tuple(paths),
                           dict(data.get("metadata", {})))


def load_environment(file) -> EnvironmentSpec:
    path = Path(file)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if exc.lineno - 1 < len(text.splitlines()) else ""
        raise EnvironmentFormatError(
            f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line}") from None
    return environment_from_json(data, path.parent, str(path))


def environment_to_json(env: EnvironmentSpec) -> dict:
    from .se3 import to_euler_pose

    prims = []
    for p in env.primitives:
        d = {"kind": p.kind, "pose": to_euler_pose(p.pose).to_json()}
        if isinstance(p, TriangleSoup) and p.source_file is None:
            d.update(vertices=p.vertices.tolist(), indices=p.indices.tolist(), interior=p.interior)
        else:
            d.update(p.params_json())
        prims.append(d)
    return {"name": env.name, "metadata": env.metadata, "primitives": prims,
            "paths": [{"waypoints": p.waypoints.tolist()} for p in env.paths]}


def fixtures_dir() -> Path:
    return Path(__file__).parent / "data" / "environments"


def load_fixture(name: str) -> EnvironmentSpec:
    """Load a shipped environment by file stem, e.g. ``"tunnel_square_10x5"``."""
    stem = name[:-5] if name.endswith(".json") else name
    return load_environment(fixtures_dir() / f"{stem}.json")


def list_fixtures() -> list[str]:
    return sorted(p.stem for p in fixtures_dir().glob("*.json"))
