"""Triangle meshes: storage, validation, primitives and OBJ round trips."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geom import Aabb, Pose, as_points

MIN_TRIANGLE_AREA = 1e-12  # m^2; anything flatter is rejected as degenerate


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray   # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64 vertex indices

    def __post_init__(self):
        v = as_points(self.vertices)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(t) == 0:
            raise ValueError("mesh has no triangles")
        if t.min() < 0 or t.max() >= len(v):
            raise ValueError("triangle index out of range")
        areas = triangle_areas(v[t])
        if np.any(areas <= MIN_TRIANGLE_AREA):
            bad = int(np.argmin(areas))
            raise ValueError(f"degenerate triangle {bad} (area {areas[bad]:.3e})")
        v = v.copy()
        v.flags.writeable = False
        t = t.copy()
        t.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def corners(self) -> np.ndarray:
        """Triangle corner coordinates, shape (T, 3, 3)."""
        return self.vertices[self.triangles]

    def aabb(self) -> Aabb:
        return Aabb.of_points(self.vertices)

    def transformed(self, pose: Pose) -> "TriMesh":
        return TriMesh(pose.apply(self.vertices), self.triangles)


def triangle_areas(corners: np.ndarray) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64)
    cross = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1)


def triangle_normals(corners: np.ndarray) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64)
    cross = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    return cross / np.maximum(np.linalg.norm(cross, axis=1, keepdims=True), 1e-30)


def merge_meshes(meshes: list[TriMesh]) -> TriMesh:
    verts = []
    tris = []
    offset = 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    return TriMesh(np.vstack(verts), np.vstack(tris))


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

_BOX_FACES = [
    (0, 1, 2, 3),  # -z
    (7, 6, 5, 4),  # +z
    (0, 4, 5, 1),  # -y
    (3, 2, 6, 7),  # +y
    (0, 3, 7, 4),  # -x
    (1, 5, 6, 2),  # +x
]


def box_mesh(extents, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Axis-aligned box of the given (x, y, z) extents, 12 triangles."""
    e = np.asarray(extents, dtype=np.float64) * 0.5
    c = np.asarray(center, dtype=np.float64)
    signs = np.array([
        [-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
        [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1],
    ], dtype=np.float64)
    verts = c + signs * e
    tris = []
    for a, b, cc, d in _BOX_FACES:
        tris.append((a, b, cc))
        tris.append((a, cc, d))
    return TriMesh(verts, np.array(tris, dtype=np.int64))


def aabb_mesh(box: Aabb) -> TriMesh:
    return box_mesh(box.extents, box.center)


def sphere_mesh(radius: float, rings: int = 12, segments: int = 24,
                center=(0.0, 0.0, 0.0)) -> TriMesh:
    """UV sphere; used by tests that need a curved analytic surface."""
    c = np.asarray(center, dtype=np.float64)
    verts = [c + np.array([0.0, 0.0, radius])]
    for i in range(1, rings):
        phi = np.pi * i / rings
        for j in range(segments):
            theta = 2.0 * np.pi * j / segments
            verts.append(c + radius * np.array([
                np.sin(phi) * np.cos(theta),
                np.sin(phi) * np.sin(theta),
                np.cos(phi),
            ]))
    verts.append(c + np.array([0.0, 0.0, -radius]))
    verts = np.array(verts)
    tris = []
    for j in range(segments):
        tris.append((0, 1 + j, 1 + (j + 1) % segments))
    for i in range(rings - 2):
        row = 1 + i * segments
        nxt = row + segments
        for j in range(segments):
            a = row + j
            b = row + (j + 1) % segments
            d = nxt + j
            e = nxt + (j + 1) % segments
            tris.append((a, d, e))
            tris.append((a, e, b))
    bottom = len(verts) - 1
    last = 1 + (rings - 2) * segments
    for j in range(segments):
        tris.append((bottom, last + (j + 1) % segments, last + j))
    return TriMesh(verts, np.array(tris, dtype=np.int64))


# ---------------------------------------------------------------------------
# OBJ serialization (v/f records only)
# ---------------------------------------------------------------------------

def save_obj(mesh: TriMesh, path) -> None:
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]!r} {v[1]!r} {v[2]!r}")
    for t in mesh.triangles:
        lines.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> TriMesh:
    verts = []
    tris = []
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v":
            if len(parts) < 4:
                raise ValueError(f"{path}:{ln}: malformed vertex record")
            verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise ValueError(f"{path}:{ln}: only triangle faces supported")
            # Tolerate v/vt/vn face syntax; only the vertex index is kept.
            tris.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
        # all other record types ignored
    if not verts or not tris:
        raise ValueError(f"{path}: no usable v/f records")
    return TriMesh(np.array(verts), np.array(tris, dtype=np.int64))
