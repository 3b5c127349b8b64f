"""Procedural triangle meshes and the shipped environment fixtures."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .environments import write_mesh


class MeshBuilder:
    """Accumulates quads whose triangles face a requested direction."""

    def __init__(self):
        self.vertices = []
        self.indices = []

    def _vertex(self, p):
        self.vertices.append(np.asarray(p, dtype=float))
        return len(self.vertices) - 1

    def triangle(self, a, b, c, facing):
        ia, ib, ic = (self._vertex(p) for p in (a, b, c))
        n = np.cross(np.subtract(b, a), np.subtract(c, a))
        if np.dot(n, facing) < 0:
            ib, ic = ic, ib
        self.indices.append((ia, ib, ic))

    def quad(self, a, b, c, d, facing):
        self.triangle(a, b, c, facing)
        self.triangle(a, c, d, facing)

    def arrays(self):
        v = np.array(self.vertices)
        # merge coincident vertices so the mesh is indexed compactly
        v_unique, inverse = np.unique(np.round(v, 9), axis=0, return_inverse=True)
        f = inverse.reshape(-1)[np.array(self.indices, dtype=np.int64)]
        return v_unique, f


def l_junction(width: float, height: float, arm: float):
    """Two open-ended corridors meeting at a right angle at the origin.

    One arm runs from x = -arm to the corner, the other from the corner to
    y = +arm. Triangles face the interior.
    """
    h, w = height, width / 2.0
    m = MeshBuilder()
    # floor and ceiling as three rectangles: x arm, corner square, y arm
    rects = [(-arm, -w, -w, w), (-w, -w, w, w), (-w, w, w, arm)]
    for x0, y0, x1, y1 in rects:
        for z, up in ((0.0, 1.0), (h, -1.0)):
            m.quad((x0, y0, z), (x1, y0, z), (x1, y1, z), (x0, y1, z), (0, 0, up))
    walls = [
        ((-arm, -w), (w, -w), (0, 1, 0)),  # outer wall of the x arm
        ((w, -w), (w, arm), (-1, 0, 0)),  # outer wall of the y arm
        ((-arm, w), (-w, w), (0, -1, 0)),  # inner walls meeting at the corner
        ((-w, w), (-w, arm), (1, 0, 0)),
    ]
    for (xa, ya), (xb, yb), facing in walls:
        m.quad((xa, ya, 0.0), (xb, yb, 0.0), (xb, yb, h), (xa, ya, h), facing)
    return m.arrays()


def _rect_perimeter(width: float, height: float, spacing: float):
    """Closed loop around a ``width x height`` cross-section, corners included."""
    w = width / 2.0
    corners = [(-w, 0.0), (w, 0.0), (w, height), (-w, height)]
    loop = []
    for k in range(4):
        a, b = np.array(corners[k]), np.array(corners[(k + 1) % 4])
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / spacing)))
        loop.extend(a + (b - a) * t for t in np.arange(n) / n)
    return np.array(loop)


def roughened_tunnel(width: float, height: float, length: float, amplitude: float,
                     spacing: float = 1.0, seed: int = 0):
    """Open square tunnel along x whose vertices are pushed toward the axis by
    seeded uniform noise in ``[0, amplitude]``."""
    rng = np.random.default_rng(seed)
    loop = _rect_perimeter(width, height, spacing)
    xs = np.linspace(-length / 2.0, length / 2.0, int(np.ceil(length / spacing)) + 1)
    centre = np.array([0.0, height / 2.0])
    grid = np.empty((len(xs), len(loop), 3))
    for i, x in enumerate(xs):
        inward = centre - loop
        inward /= np.linalg.norm(inward, axis=1, keepdims=True)
        yz = loop + inward * rng.uniform(0.0, amplitude, (len(loop), 1))
        grid[i, :, 0] = x
        grid[i, :, 1:] = yz
    v = grid.reshape(-1, 3)
    n_loop = len(loop)
    faces = []
    for i in range(len(xs) - 1):
        for k in range(n_loop):
            a, b = i * n_loop + k, i * n_loop + (k + 1) % n_loop
            c, d = a + n_loop, b + n_loop
            faces.extend([(a, b, d), (a, d, c)])
    f = np.array(faces, dtype=np.int64)
    # orient every triangle toward the tunnel axis
    tri = v[f]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    to_axis = np.column_stack([np.zeros(len(f)), centre[0] - tri[:, :, 1].mean(1),
                               centre[1] - tri[:, :, 2].mean(1)])
    flip = np.einsum("ij,ij->i", n, to_axis) < 0
    f[flip] = f[flip][:, [0, 2, 1]]
    return v, f


# --------------------------------------------------------------------------
# shipped fixtures


def _path(*points):
    return {"waypoints": [list(map(float, p)) for p in points]}


def _line(a, b, n):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return [tuple(a + (b - a) * t) for t in np.linspace(0.0, 1.0, n)]


def fixture_specs() -> dict:
    """JSON dictionaries of the shipped environments, keyed by file stem."""
    s = {}
    s["plane_flat"] = {
        "primitives": [{"kind": "plane", "extent": [2000.0, 2000.0]}],
        "paths": [_path(*_line((-20, 0, 1.0), (20, 0, 1.0), 9))],
        "metadata": {"category": "plane"}}
    for w, h in ((10, 5), (6, 4), (4, 3)):
        s[f"tunnel_square_{w}x{h}"] = {
            "primitives": [{"kind": "square_tunnel", "width": w, "height": h, "length": 200.0}],
            "paths": [_path(*_line((-20, 0, h / 2.0), (20, 0, h / 2.0), 9))],
            "metadata": {"category": "tunnel"}}
    for r in (3.0, 2.0):
        s[f"cylinder_r{int(r)}"] = {
            "primitives": [{"kind": "cylinder", "radius": r, "length": 200.0}],
            "paths": [_path(*_line((-20, 0, 0), (20, 0, 0), 9))],
            "metadata": {"category": "cylinder"}}
    rooms = {"room_cornered": (16, 12, 4), "room_hall": (24, 16, 5),
             "room_small": (12, 9, 3.5), "corridor_closed": (30, 5, 3)}
    for name, (W, L, H) in rooms.items():
        a = min(W / 2.0 - 2.0, 8.0)
        s[name] = {
            "primitives": [{"kind": "box_room", "size": [W, L, H]}],
            "paths": [_path(*_line((-a, 0, 1.2), (a, 0, 1.2), 5))],
            "metadata": {"category": "room"}}
    for name, (w, h, arm) in {"l_junction_6x4": (6, 4, 30), "l_junction_8x5": (8, 5, 40)}.items():
        s[name] = {
            "primitives": [{"kind": "triangle_soup", "file": f"{name}.l3emesh", "interior": True}],
            "paths": [_path((-arm + 10, 0, h / 2.0), (0, 0, h / 2.0), (0, arm - 10, h / 2.0))],
            "metadata": {"category": "junction"}}
    for k, amp in enumerate((0.05, 0.15, 0.3)):
        name = f"tunnel_rough_{int(amp * 100):02d}cm"
        s[name] = {
            "primitives": [{"kind": "triangle_soup", "file": f"{name}.l3emesh", "interior": True}],
            "paths": [_path(*_line((-20, 0, 2.0), (20, 0, 2.0), 9))],
            "metadata": {"category": "rough_tunnel", "stand_in": True,
                         "note": "procedural roughening in place of a meshed cave scan",
                         "roughness_m": amp, "seed": k}}
    for name, spec in s.items():
        spec["name"] = name
    return s


def fixture_meshes() -> dict:
    meshes = {"l_junction_6x4": l_junction(6, 4, 30), "l_junction_8x5": l_junction(8, 5, 40)}
    for k, amp in enumerate((0.05, 0.15, 0.3)):
        meshes[f"tunnel_rough_{int(amp * 100):02d}cm"] = roughened_tunnel(6, 4, 60, amp, seed=k)
    return meshes


def build_fixtures(directory) -> list:
    """Write every fixture JSON (and mesh) into ``directory``; returns written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for name, (v, f) in fixture_meshes().items():
        write_mesh(directory / f"{name}.l3emesh", v, f)
        out.append(directory / f"{name}.l3emesh")
    for name, spec in fixture_specs().items():
        p = directory / f"{name}.json"
        p.write_text(json.dumps(spec, indent=1, sort_keys=True) + "\n")
        out.append(p)
    return out
