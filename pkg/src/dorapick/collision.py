"""Exact mesh collision and separation queries.

Narrow phase is Moller's interval triangle-triangle test (with the
coplanar branch); distance uses the closed-form edge-edge and
vertex-face primitives. Broad phase is per-triangle AABB overlap,
vectorized, plus a plane-side prefilter: no spatial tree, which keeps
results trivially deterministic and easy to cross-check against the
unfiltered pairwise oracle.
"""

from __future__ import annotations

import numpy as np

from .geom import Pose
from .mesh import TriMesh

PLANE_EPS = 1e-9  # m; signed distances below this count as "on the plane"


# ---------------------------------------------------------------------------
# Scalar primitives
# ---------------------------------------------------------------------------

def _project_axis(n: np.ndarray) -> int:
    return int(np.argmax(np.abs(n)))


def _edges_cross_2d(p1, q1, p2, q2) -> bool:
    d1 = q1 - p1
    d2 = q2 - p2
    denom = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(denom) < 1e-18:
        return False
    r = p2 - p1
    t = (r[0] * d2[1] - r[1] * d2[0]) / denom
    u = (r[0] * d1[1] - r[1] * d1[0]) / denom
    return -1e-12 <= t <= 1 + 1e-12 and -1e-12 <= u <= 1 + 1e-12


def _point_in_tri_2d(p, a, b, c) -> bool:
    def side(u, v, w):
        return (v[0] - u[0]) * (w[1] - u[1]) - (v[1] - u[1]) * (w[0] - u[0])

    s1 = side(a, b, p)
    s2 = side(b, c, p)
    s3 = side(c, a, p)
    has_neg = (s1 < -1e-18) or (s2 < -1e-18) or (s3 < -1e-18)
    has_pos = (s1 > 1e-18) or (s2 > 1e-18) or (s3 > 1e-18)
    return not (has_neg and has_pos)


def _coplanar_tri_tri(t0: np.ndarray, t1: np.ndarray, n: np.ndarray) -> bool:
    axis = _project_axis(n)
    keep = [i for i in range(3) if i != axis]
    a = t0[:, keep]
    b = t1[:, keep]
    for i in range(3):
        for j in range(3):
            if _edges_cross_2d(a[i], a[(i + 1) % 3], b[j], b[(j + 1) % 3]):
                return True
    if _point_in_tri_2d(a[0], b[0], b[1], b[2]):
        return True
    if _point_in_tri_2d(b[0], a[0], a[1], a[2]):
        return True
    return False


def _interval(proj, d, side_eps=PLANE_EPS):
    """Interval of the plane-intersection line covered by one triangle.

    ``proj`` are the three vertex projections on the line axis, ``d`` the
    signed distances to the other triangle's plane (zeros snapped).
    """
    # Pick the vertex that sits alone on its side of the plane.
    if d[0] * d[1] > 0:
        odd, others = 2, (0, 1)
    elif d[0] * d[2] > 0:
        odd, others = 1, (0, 2)
    elif d[1] * d[2] > 0 or d[0] != 0:
        odd, others = 0, (1, 2)
    elif d[1] != 0:
        odd, others = 1, (0, 2)
    else:
        odd, others = 2, (0, 1)
    if d[odd] == 0:
        # Triangle touches the plane at a vertex/edge only.
        pts = [proj[i] for i in range(3) if abs(d[i]) <= side_eps]
        return min(pts), max(pts)
    t = []
    for i in others:
        if d[i] == d[odd]:
            t.append(proj[i])
        else:
            t.append(proj[i] + (proj[odd] - proj[i]) * d[i] / (d[i] - d[odd]))
    return min(t), max(t)


def tri_tri_intersect(t0, t1) -> bool:
    """True iff two 3D triangles intersect (touching counts)."""
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)

    n1 = np.cross(t1[1] - t1[0], t1[2] - t1[0])
    n1 = n1 / np.linalg.norm(n1)
    du = t0 @ n1 - float(n1 @ t1[0])
    du[np.abs(du) <= PLANE_EPS] = 0.0
    if np.all(du > 0) or np.all(du < 0):
        return False

    n0 = np.cross(t0[1] - t0[0], t0[2] - t0[0])
    n0 = n0 / np.linalg.norm(n0)
    dv = t1 @ n0 - float(n0 @ t0[0])
    dv[np.abs(dv) <= PLANE_EPS] = 0.0
    if np.all(dv > 0) or np.all(dv < 0):
        return False

    if np.all(du == 0) and np.all(dv == 0):
        return _coplanar_tri_tri(t0, t1, n0)

    line = np.cross(n0, n1)
    norm = np.linalg.norm(line)
    if norm < 1e-12:
        # Parallel but distinct planes already rejected; treat as coplanar.
        return _coplanar_tri_tri(t0, t1, n0)
    axis = _project_axis(line)
    a_lo, a_hi = _interval(t0[:, axis], du)
    b_lo, b_hi = _interval(t1[:, axis], dv)
    return max(a_lo, b_lo) <= min(a_hi, b_hi) + 1e-12


def _point_triangle_distance(p, a, b, c) -> float:
    """Ericson's closest-point-on-triangle, distance only."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = float(ab @ ap)
    d2 = float(ac @ ap)
    if d1 <= 0 and d2 <= 0:
        return float(np.linalg.norm(p - a))
    bp = p - b
    d3 = float(ab @ bp)
    d4 = float(ac @ bp)
    if d3 >= 0 and d4 <= d3:
        return float(np.linalg.norm(p - b))
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        v = d1 / (d1 - d3)
        return float(np.linalg.norm(p - (a + v * ab)))
    cp = p - c
    d5 = float(ab @ cp)
    d6 = float(ac @ cp)
    if d6 >= 0 and d5 <= d6:
        return float(np.linalg.norm(p - c))
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        w = d2 / (d2 - d6)
        return float(np.linalg.norm(p - (a + w * ac)))
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return float(np.linalg.norm(p - (b + w * (c - b))))
    n = np.cross(ab, ac)
    n = n / np.linalg.norm(n)
    return abs(float((p - a) @ n))


def _segment_segment_distance(p1, q1, p2, q2) -> float:
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = float(d1 @ d1)
    e = float(d2 @ d2)
    f = float(d2 @ r)
    c = float(d1 @ r)
    b = float(d1 @ d2)
    denom = a * e - b * b
    if denom > 1e-18:
        s = np.clip((b * f - c * e) / denom, 0.0, 1.0)
    else:
        s = 0.0
    t = (b * s + f) / e if e > 1e-18 else 0.0
    if t < 0.0:
        t = 0.0
        s = np.clip(-c / a, 0.0, 1.0) if a > 1e-18 else 0.0
    elif t > 1.0:
        t = 1.0
        s = np.clip((b - c) / a, 0.0, 1.0) if a > 1e-18 else 0.0
    return float(np.linalg.norm((p1 + s * d1) - (p2 + t * d2)))


def triangle_distance(t0, t1) -> float:
    """Minimum distance between two triangles; 0 when they intersect."""
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    if tri_tri_intersect(t0, t1):
        return 0.0
    best = np.inf
    for i in range(3):
        for j in range(3):
            best = min(best, _segment_segment_distance(
                t0[i], t0[(i + 1) % 3], t1[j], t1[(j + 1) % 3]))
    for i in range(3):
        best = min(best, _point_triangle_distance(t0[i], t1[0], t1[1], t1[2]))
        best = min(best, _point_triangle_distance(t1[i], t0[0], t0[1], t0[2]))
    return best


# ---------------------------------------------------------------------------
# Triangle soups (world-space, precomputed broad-phase data)
# ---------------------------------------------------------------------------

class TriangleSoup:
    """A mesh baked into world space with per-triangle bounds."""

    def __init__(self, corners: np.ndarray):
        self.corners = np.asarray(corners, dtype=np.float64)
        self.tri_lo = self.corners.min(axis=1)
        self.tri_hi = self.corners.max(axis=1)
        self.lo = self.tri_lo.min(axis=0)
        self.hi = self.tri_hi.max(axis=0)

    @staticmethod
    def of(mesh: TriMesh, pose: Pose | None = None) -> "TriangleSoup":
        corners = mesh.corners()
        if pose is not None:
            corners = pose.apply(corners.reshape(-1, 3)).reshape(-1, 3, 3)
        return TriangleSoup(corners)

    def __len__(self) -> int:
        return len(self.corners)


def _candidate_pairs(a: TriangleSoup, b: TriangleSoup, margin: float = 0.0) -> np.ndarray:
    """Index pairs whose triangle AABBs overlap (within margin)."""
    ok = np.all(
        (a.tri_lo[:, None, :] <= b.tri_hi[None, :, :] + margin)
        & (b.tri_lo[None, :, :] <= a.tri_hi[:, None, :] + margin),
        axis=2,
    )
    return np.argwhere(ok)


def soups_collide(a: TriangleSoup, b: TriangleSoup) -> bool:
    if not (np.all(a.lo <= b.hi) and np.all(b.lo <= a.hi)):
        return False
    pairs = _candidate_pairs(a, b)
    if len(pairs) == 0:
        return False
    for i, j in pairs:
        if tri_tri_intersect(a.corners[i], b.corners[j]):
            return True
    return False


def soups_distance(a: TriangleSoup, b: TriangleSoup) -> float:
    """Exact minimum surface distance; prunes pairs by box distance."""
    gap_lo = np.maximum(a.tri_lo[:, None, :], b.tri_lo[None, :, :])
    gap_hi = np.minimum(a.tri_hi[:, None, :], b.tri_hi[None, :, :])
    gap = np.maximum(gap_lo - gap_hi, 0.0)
    box_d = np.sqrt((gap ** 2).sum(axis=2))
    order = np.argsort(box_d, axis=None)
    flat = box_d.ravel()
    nb = len(b)
    best = np.inf
    for k in order:
        if flat[k] >= best:
            break
        i, j = divmod(int(k), nb)
        best = min(best, triangle_distance(a.corners[i], b.corners[j]))
        if best == 0.0:
            return 0.0
    return float(best)


def mesh_collide(a: TriMesh, pa: Pose, b: TriMesh, pb: Pose) -> bool:
    """True iff any triangle of ``a`` (posed) intersects any of ``b``."""
    return soups_collide(TriangleSoup.of(a, pa), TriangleSoup.of(b, pb))


def mesh_distance(a: TriMesh, pa: Pose, b: TriMesh, pb: Pose) -> float:
    return soups_distance(TriangleSoup.of(a, pa), TriangleSoup.of(b, pb))
