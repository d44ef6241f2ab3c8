"""Procedural primitives with constructive meshes and analytic signed distances.

Every shape is a union of convex parts. Each part carries a closed triangle
mesh and an exact SDF; the shape SDF is the minimum over parts (exact outside,
a bound inside). Distances are positive outside.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

KINDS = ("box", "sphere", "cylinder", "l_bracket", "table")
FRACTURE_KINDS = ("box", "sphere", "cylinder", "l_bracket")
PART_KINDS = ("table", "l_bracket")

SPHERE_RADIUS = 0.4


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    @property
    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    @property
    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    @property
    def area(self) -> float:
        return float(self.face_areas.sum())

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Area-uniform surface points and their face normals."""
        areas = self.face_areas
        idx = rng.choice(len(areas), size=n, p=areas / areas.sum())
        u, v = rng.random(n), rng.random(n)
        flip = u + v > 1
        u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
        tri = self.vertices[self.faces[idx]]
        pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
        return pts, self.face_normals[idx]

    def translated(self, offset) -> "TriMesh":
        return TriMesh(self.vertices + np.asarray(offset), self.faces.copy())

    def write_obj(self, path) -> None:
        with open(path, "w") as f:
            for v in self.vertices:
                f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
            for a, b, c in self.faces + 1:
                f.write(f"f {a} {b} {c}\n")

    def write_ply(self, path) -> None:
        """Binary little-endian PLY."""
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {len(self.vertices)}\nproperty float x\nproperty float y\nproperty float z\n"
            f"element face {len(self.faces)}\nproperty list uchar int vertex_indices\nend_header\n"
        )
        faces = np.empty(len(self.faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        faces["n"] = 3
        faces["idx"] = self.faces
        with open(path, "wb") as f:
            f.write(header.encode())
            f.write(self.vertices.astype("<f4").tobytes())
            f.write(faces.tobytes())

    def write(self, path) -> None:
        path = str(path)
        if path.endswith(".obj"):
            self.write_obj(path)
        elif path.endswith(".ply"):
            self.write_ply(path)
        else:
            raise ValueError(f"unsupported mesh format: {path}")

    @staticmethod
    def concatenate(meshes) -> "TriMesh":
        verts, faces, base = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            faces.append(m.faces + base)
            base += len(m.vertices)
        return TriMesh(np.concatenate(verts), np.concatenate(faces))


# -- signed distances --------------------------------------------------------

def sdf_sphere(p, center, radius):
    return np.linalg.norm(p - center, axis=-1) - radius


def sdf_box(p, center, half):
    q = np.abs(p - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def sdf_cylinder(p, center, radius, half_height):
    """Capped cylinder along z."""
    d = p - center
    q = np.stack([np.linalg.norm(d[..., :2], axis=-1) - radius, np.abs(d[..., 2]) - half_height], -1)
    return np.minimum(q.max(axis=-1), 0.0) + np.linalg.norm(np.maximum(q, 0.0), axis=-1)


# -- meshes --------------------------------------------------------------------

def box_mesh(center, half) -> TriMesh:
    c, h = np.asarray(center, float), np.asarray(half, float)
    signs = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float)
    verts = c + signs * h
    # vertex index = 4*(x>0) + 2*(y>0) + (z>0); faces wound counter-clockwise from outside
    faces = np.array(
        [
            [0, 1, 3], [0, 3, 2],  # -x
            [4, 6, 7], [4, 7, 5],  # +x
            [0, 4, 5], [0, 5, 1],  # -y
            [2, 3, 7], [2, 7, 6],  # +y
            [0, 2, 6], [0, 6, 4],  # -z
            [1, 5, 7], [1, 7, 3],  # +z
        ]
    )
    return TriMesh(verts, faces)


def icosphere(radius: float, subdivisions: int = 3, center=(0.0, 0.0, 0.0)) -> TriMesh:
    t = (1.0 + 5.0**0.5) / 2.0
    verts = [
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ]
    faces = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    verts = [np.asarray(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return TriMesh(np.asarray(verts) * radius + np.asarray(center), np.asarray(faces))


def cylinder_mesh(radius: float, half_height: float, segments: int = 64, center=(0.0, 0.0, 0.0)) -> TriMesh:
    ang = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], 1)
    bottom = np.concatenate([ring, np.full((segments, 1), -half_height)], 1)
    top = np.concatenate([ring, np.full((segments, 1), half_height)], 1)
    verts = np.concatenate([bottom, top, [[0, 0, -half_height], [0, 0, half_height]]])
    cb, ct = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [[i, j, segments + j], [i, segments + j, segments + i]]
        faces += [[cb, j, i], [ct, segments + i, segments + j]]
    return TriMesh(verts + np.asarray(center), np.asarray(faces))


# -- shapes --------------------------------------------------------------------

@dataclass
class Part:
    name: str
    mesh: TriMesh
    sdf: Callable[[np.ndarray], np.ndarray]


@dataclass
class Shape:
    kind: str
    parts: list[Part]
    params: dict = field(default_factory=dict)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return np.min(np.stack([part.sdf(p) for part in self.parts]), axis=0)

    @property
    def mesh(self) -> TriMesh:
        return TriMesh.concatenate([p.mesh for p in self.parts])

    def sample_surface(self, n: int, rng: np.random.Generator, offset: float = 1e-4):
        """Area-uniform points on the outer surface of the union, with part labels.

        Returns (points, part_labels, surface_area). Points whose outward
        neighbourhood lies inside another part (contact faces) are rejected.
        """
        areas = np.array([p.mesh.area for p in self.parts])
        pts_out, lab_out = [], []
        tried = accepted = 0
        while accepted < n:
            want = max(2 * (n - accepted), 256)
            counts = rng.multinomial(want, areas / areas.sum())
            for k, (part, c) in enumerate(zip(self.parts, counts)):
                if c == 0:
                    continue
                pts, normals = part.mesh.sample(int(c), rng)
                if len(self.parts) > 1:
                    ok = self.sdf(pts + offset * normals) > 0
                else:
                    ok = np.ones(len(pts), dtype=bool)
                pts_out.append(pts[ok])
                lab_out.append(np.full(int(ok.sum()), k))
                tried += int(c)
                accepted += int(ok.sum())
        pts = np.concatenate(pts_out)
        lab = np.concatenate(lab_out)
        keep = rng.permutation(len(pts))[:n]
        surface_area = float(areas.sum() * accepted / tried)
        return pts[keep], lab[keep], surface_area


def _center_parts(parts: list[Part]) -> list[Part]:
    verts = np.concatenate([p.mesh.vertices for p in parts])
    c = 0.5 * (verts.min(axis=0) + verts.max(axis=0))
    out = []
    for p in parts:
        f = p.sdf
        out.append(Part(p.name, p.mesh.translated(-c), lambda x, f=f, c=c: f(x + c)))
    return out


def make_shape(kind: str, rng: np.random.Generator) -> Shape:
    """Random instance of ``kind``, centred at the origin and inside [-1, 1]^3."""
    if kind == "sphere":
        r = SPHERE_RADIUS
        parts = [Part("sphere", icosphere(r, 4), lambda p: sdf_sphere(p, 0.0, r))]
        return Shape(kind, parts, {"radius": r})
    if kind == "box":
        half = rng.uniform(0.2, 0.5, size=3)
        parts = [Part("box", box_mesh(np.zeros(3), half), lambda p: sdf_box(p, 0.0, half))]
        return Shape(kind, parts, {"half_extents": half})
    if kind == "cylinder":
        r, h = rng.uniform(0.2, 0.45), rng.uniform(0.2, 0.5)
        parts = [Part("cylinder", cylinder_mesh(r, h), lambda p: sdf_cylinder(p, 0.0, r, h))]
        return Shape(kind, parts, {"radius": r, "half_height": h})
    if kind == "l_bracket":
        length, height = rng.uniform(0.6, 1.0), rng.uniform(0.5, 0.9)
        thick, depth = rng.uniform(0.12, 0.25), rng.uniform(0.3, 0.7)
        a_c, a_h = np.array([length / 2, thick / 2, 0.0]), np.array([length / 2, thick / 2, depth / 2])
        b_c = np.array([thick / 2, thick + (height - thick) / 2, 0.0])
        b_h = np.array([thick / 2, (height - thick) / 2, depth / 2])
        parts = [
            Part("base", box_mesh(a_c, a_h), lambda p: sdf_box(p, a_c, a_h)),
            Part("upright", box_mesh(b_c, b_h), lambda p: sdf_box(p, b_c, b_h)),
        ]
        params = {"length": length, "height": height, "thickness": thick, "depth": depth}
        return Shape(kind, _center_parts(parts), params)
    if kind == "table":
        top_h = np.array([rng.uniform(0.35, 0.5), rng.uniform(0.25, 0.45), rng.uniform(0.03, 0.06)])
        leg_w, leg_len = rng.uniform(0.03, 0.06), rng.uniform(0.35, 0.6)
        inset = rng.uniform(0.0, 0.05)
        top_c = np.array([0.0, 0.0, leg_len + top_h[2]])
        parts = [Part("top", box_mesh(top_c, top_h), lambda p: sdf_box(p, top_c, top_h))]
        leg_h = np.array([leg_w, leg_w, leg_len / 2])
        for i, (sx, sy) in enumerate([(-1, -1), (1, -1), (1, 1), (-1, 1)]):
            c = np.array([sx * (top_h[0] - leg_w - inset), sy * (top_h[1] - leg_w - inset), leg_len / 2])
            parts.append(Part(f"leg{i}", box_mesh(c, leg_h), lambda p, c=c: sdf_box(p, c, leg_h)))
        params = {"top_half_extents": top_h, "leg_width": leg_w, "leg_length": leg_len}
        return Shape(kind, _center_parts(parts), params)
    raise ValueError(f"unknown shape kind {kind!r}; expected one of {KINDS}")
