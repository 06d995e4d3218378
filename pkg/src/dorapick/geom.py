"""Core geometric types and kernels.

Rigid transforms (unit quaternion + translation), colored point clouds,
axis-aligned boxes, exact nearest-neighbor queries and the least-squares
rigid alignment used by the registration pipeline.

Conventions
-----------
- Points and vectors are float64 numpy arrays, shape (3,) or (N, 3), meters.
- Quaternions are stored (w, x, y, z) and kept unit-length; a Pose maps
  points from its local frame into the parent frame: ``x_parent = R x + t``.
- Clouds are tagged with the camera pose they were captured from (when
  known) so downstream stages never have to guess the frame.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

UNIT_QUAT_TOL = 1e-9
UNIT_NORMAL_TOL = 1e-6


def vec3(x: float, y: float, z: float) -> np.ndarray:
    """Build a float64 3-vector."""
    return np.array([x, y, z], dtype=np.float64)


def as_points(a) -> np.ndarray:
    """Coerce array-like to a float64 (N, 3) array."""
    pts = np.asarray(a, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
    return pts


def normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n < 1e-15:
        raise ValueError("cannot normalize zero-length vector")
    return v / n


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    out.flags.writeable = False
    return out


# ---------------------------------------------------------------------------
# Quaternion algebra
# ---------------------------------------------------------------------------

def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = normalize(np.asarray(axis, dtype=np.float64))
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (Shepperd's branch selection)."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    q = q / np.linalg.norm(q)
    # Canonical sign: nonnegative scalar part, for reproducible serialization.
    if q[0] < 0:
        q = -q
    return q


def quat_angle(q: np.ndarray) -> float:
    """Rotation angle in radians encoded by a unit quaternion."""
    w = min(1.0, abs(float(q[0])))
    return 2.0 * math.acos(w)


def quat_slerp(a: np.ndarray, b: np.ndarray, u: float) -> np.ndarray:
    dot = float(np.dot(a, b))
    if dot < 0.0:
        b = -b
        dot = -dot
    if dot > 1.0 - 1e-12:
        q = a + u * (b - a)
        return q / np.linalg.norm(q)
    theta = math.acos(min(1.0, dot))
    s = math.sin(theta)
    q = (math.sin((1.0 - u) * theta) / s) * a + (math.sin(u * theta) / s) * b
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------------------
# Pose
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid transform: rotation (unit quaternion, wxyz) then translation."""

    q: np.ndarray = field(default_factory=quat_identity)
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(q)) or not np.all(np.isfinite(t)):
            raise ValueError("pose components must be finite")
        nq = np.linalg.norm(q)
        if abs(nq - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {nq} too far from 1")
        q = q / nq
        if q[0] < 0:
            q = -q
        object.__setattr__(self, "q", _frozen(q))
        object.__setattr__(self, "t", _frozen(t))

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_rt(rotation: np.ndarray, translation) -> "Pose":
        return Pose(quat_from_matrix(rotation), np.asarray(translation, dtype=np.float64))

    @staticmethod
    def from_axis_angle(axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return Pose(quat_from_axis_angle(np.asarray(axis, float), angle),
                    np.asarray(translation, dtype=np.float64))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            return self.rotation @ pts + self.t
        return pts @ self.rotation.T + self.t

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        v = np.asarray(vectors, dtype=np.float64)
        if v.ndim == 1:
            return self.rotation @ v
        return v @ self.rotation.T


def compose(a: Pose, b: Pose) -> Pose:
    """Pose applying ``b`` first, then ``a``. Renormalizes to kill drift."""
    q = quat_mul(a.q, b.q)
    q = q / np.linalg.norm(q)
    return Pose(q, a.apply(b.t))


def invert(p: Pose) -> Pose:
    qi = quat_conj(p.q)
    return Pose(qi, -(quat_to_matrix(qi) @ p.t))


def pose_delta(a: Pose, b: Pose) -> tuple[float, float]:
    """(rotation angle rad, translation distance m) between two poses."""
    rel = compose(invert(a), b)
    return quat_angle(rel.q), float(np.linalg.norm(a.t - b.t))


def poses_close(a: Pose, b: Pose, rot_tol: float = 1e-9, trans_tol: float = 1e-9) -> bool:
    ang, dist = pose_delta(a, b)
    return ang <= rot_tol and dist <= trans_tol


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose at ``eye`` with +Z forward toward ``target``, -Y image-up.

    Uses the computer-vision frame (x right, y down, z forward). When the
    view direction is parallel to ``up`` the roll falls back to +X world.
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = normalize(np.asarray(target, dtype=np.float64) - eye)
    up = np.asarray(up, dtype=np.float64)
    up_perp = up - np.dot(up, z) * z
    if np.linalg.norm(up_perp) < 1e-9:
        fallback = vec3(1.0, 0.0, 0.0)
        up_perp = fallback - np.dot(fallback, z) * z
    y = -normalize(up_perp)
    x = np.cross(y, z)
    return Pose.from_rt(np.column_stack([x, y, z]), eye)


# ---------------------------------------------------------------------------
# Axis-aligned boxes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Aabb:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise ValueError(f"aabb min {lo} exceeds max {hi}")
        object.__setattr__(self, "lo", _frozen(lo))
        object.__setattr__(self, "hi", _frozen(hi))

    @staticmethod
    def of_points(points: np.ndarray) -> "Aabb":
        pts = as_points(points)
        return Aabb(pts.min(axis=0), pts.max(axis=0))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def extents(self) -> np.ndarray:
        return self.hi - self.lo

    def expanded(self, margin: float) -> "Aabb":
        return Aabb(self.lo - margin, self.hi + margin)

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        pts = as_points(points)
        lo = self.lo - margin
        hi = self.hi + margin
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def contains_box(self, other: "Aabb", tol: float = 0.0) -> bool:
        return bool(np.all(other.lo >= self.lo - tol) and np.all(other.hi <= self.hi + tol))

    def intersects(self, other: "Aabb") -> bool:
        return bool(np.all(self.lo <= other.hi) and np.all(other.lo <= self.hi))


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PointCloud:
    """Colored 3D points with optional oriented normals.

    ``normals_valid`` marks points whose neighborhood was too degenerate to
    fit a plane; those normals are zero and must be ignored. ``viewpoint``
    records the capture camera pose in the cloud's own frame.
    """

    positions: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None
    normals_valid: np.ndarray | None = None
    viewpoint: Pose | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        object.__setattr__(self, "positions", _frozen(pos))
        n = len(pos)
        if self.colors is not None:
            col = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(col) != n:
                raise ValueError(f"{len(col)} colors for {n} points")
            if col.size and (col.min() < -1e-9 or col.max() > 1.0 + 1e-9):
                raise ValueError("colors must lie in [0, 1]")
            object.__setattr__(self, "colors", _frozen(col))
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != n:
                raise ValueError(f"{len(nrm)} normals for {n} points")
            if self.normals_valid is None:
                valid = np.ones(n, dtype=bool)
            else:
                valid = np.asarray(self.normals_valid, dtype=bool).reshape(-1)
                if len(valid) != n:
                    raise ValueError("normals_valid length mismatch")
            if valid.any():
                lens = np.linalg.norm(nrm[valid], axis=1)
                if lens.size and np.max(np.abs(lens - 1.0)) > UNIT_NORMAL_TOL:
                    raise ValueError("valid normals must be unit length")
            object.__setattr__(self, "normals", _frozen(nrm))
            valid = valid.copy()
            valid.flags.writeable = False
            object.__setattr__(self, "normals_valid", valid)
        elif self.normals_valid is not None:
            raise ValueError("normals_valid given without normals")

    def __len__(self) -> int:
        return len(self.positions)

    def select(self, mask_or_indices) -> "PointCloud":
        """Subset preserving point order and all attributes."""
        return PointCloud(
            self.positions[mask_or_indices],
            None if self.colors is None else self.colors[mask_or_indices],
            None if self.normals is None else self.normals[mask_or_indices],
            None if self.normals_valid is None else self.normals_valid[mask_or_indices],
            self.viewpoint,
        )

    def with_viewpoint(self, viewpoint: Pose | None) -> "PointCloud":
        return PointCloud(self.positions, self.colors, self.normals,
                          self.normals_valid, viewpoint)


def empty_cloud(viewpoint: Pose | None = None) -> PointCloud:
    return PointCloud(np.zeros((0, 3)), viewpoint=viewpoint)


def transform_cloud(p: Pose, c: PointCloud) -> PointCloud:
    """Rigidly transform positions and normals; colors are untouched.

    The viewpoint tag is re-expressed in the destination frame so the
    cloud stays self-consistent.
    """
    vp = None if c.viewpoint is None else compose(p, c.viewpoint)
    return PointCloud(
        p.apply(c.positions),
        c.colors,
        None if c.normals is None else c.normals @ p.rotation.T,
        c.normals_valid,
        vp,
    )


def concat_clouds(clouds: list[PointCloud], viewpoint: Pose | None = None) -> PointCloud:
    clouds = [c for c in clouds if len(c)]
    if not clouds:
        return empty_cloud(viewpoint)
    has_col = all(c.colors is not None for c in clouds)
    has_nrm = all(c.normals is not None for c in clouds)
    return PointCloud(
        np.vstack([c.positions for c in clouds]),
        np.vstack([c.colors for c in clouds]) if has_col else None,
        np.vstack([c.normals for c in clouds]) if has_nrm else None,
        np.concatenate([c.normals_valid for c in clouds]) if has_nrm else None,
        viewpoint,
    )


# ---------------------------------------------------------------------------
# Nearest-neighbor index
# ---------------------------------------------------------------------------

def _exact_distance(p: np.ndarray, q: np.ndarray) -> float:
    d = p - q
    return float(np.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]))


class SpatialIndex:
    """k-d accelerator whose queries match brute force exactly.

    ``nearest`` resolves distance ties to the lowest point index so results
    are reproducible regardless of tree layout.
    """

    def __init__(self, points: np.ndarray):
        pts = as_points(points)
        if len(pts) == 0:
            raise ValueError("cannot index an empty point set")
        self._points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self._points)

    @property
    def points(self) -> np.ndarray:
        return self._points

    def nearest(self, query) -> tuple[int, float]:
        q = np.asarray(query, dtype=np.float64).reshape(3)
        d, i = self._tree.query(q)
        # Re-gather every candidate at the winning distance and break the
        # tie on index; guards against tree traversal order.
        cands = self._tree.query_ball_point(q, float(d) * (1.0 + 1e-12) + 1e-300)
        best_i = int(i)
        best_d = _exact_distance(self._points[best_i], q)
        for j in cands:
            dj = _exact_distance(self._points[j], q)
            if dj < best_d or (dj == best_d and j < best_i):
                best_i, best_d = int(j), dj
        return best_i, best_d

    def query(self, points: np.ndarray):
        """Batch 1-NN: (distances, indices). Ties follow tree order."""
        d, i = self._tree.query(as_points(points))
        return np.asarray(d, dtype=np.float64), np.asarray(i, dtype=np.int64)

    def query_knn(self, points: np.ndarray, k: int):
        d, i = self._tree.query(as_points(points), k=k)
        return np.atleast_2d(d), np.atleast_2d(i)


# ---------------------------------------------------------------------------
# Normals and rigid alignment
# ---------------------------------------------------------------------------

def estimate_normals(c: PointCloud, k: int, viewpoint) -> PointCloud:
    """Per-point unit normals from PCA of the k nearest neighbors.

    Signs are oriented toward ``viewpoint``. Neighborhoods whose two
    smallest covariance eigenvalues are both near zero (collinear points)
    get a zero normal flagged invalid.
    """
    n = len(c)
    if k < 3:
        raise ValueError("k must be at least 3")
    if n < k:
        raise ValueError(f"cloud has {n} points, need at least k={k}")
    vp = np.asarray(viewpoint, dtype=np.float64).reshape(3)
    tree = cKDTree(c.positions)
    _, idx = tree.query(c.positions, k=k)
    idx = np.atleast_2d(idx)
    neigh = c.positions[idx]                        # (n, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)              # ascending eigenvalues
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], 1e-30)
    valid = (evals[:, 1] / scale) > 1e-9            # mid eigenvalue ~0 => collinear
    flip = np.einsum("ni,ni->n", vp - c.positions, normals) < 0
    normals[flip] *= -1.0
    lens = np.linalg.norm(normals, axis=1)
    ok = lens > 1e-12
    valid &= ok
    normals[valid] /= lens[valid, None]
    normals[~valid] = 0.0
    return PointCloud(c.positions, c.colors, normals, valid, c.viewpoint)


def best_rigid_transform(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares pose mapping src[i] onto dst[i] (centroid + SVD).

    Guarantees a proper rotation (det = +1). Raises on fewer than three
    pairs or degenerate (collinear) geometry where the rotation is not
    determined.
    """
    a = as_points(src)
    b = as_points(dst)
    if a.shape != b.shape:
        raise ValueError("src/dst length mismatch")
    if len(a) < 3:
        raise ValueError("need at least 3 correspondences")
    ca = a.mean(axis=0)
    cb = b.mean(axis=0)
    h = (a - ca).T @ (b - cb)
    u, s, vt = np.linalg.svd(h)
    # Two vanishing singular values means the points are collinear and the
    # rotation about that axis is unconstrained.
    if s[1] <= max(1e-12, 1e-9 * s[0]):
        raise ValueError("degenerate correspondences (collinear points)")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    diag = np.diag([1.0, 1.0, d])
    r = vt.T @ diag @ u.T
    return Pose.from_rt(r, cb - r @ ca)
