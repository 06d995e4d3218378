"""Detection pipeline: crop, downsample, de-noise, match, refine.

The matcher works directly on point-cloud snapshots. Each template knows
the camera pose it was captured from (in the object frame), so pairing it
with the scene's camera pose yields a full orientation hypothesis; the
template id therefore encodes orientation while the matched cluster
centroid supplies position. ICP then tightens the 6D estimate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geom import (Aabb, PointCloud, Pose, best_rigid_transform, compose,
                   invert, pose_delta)

if TYPE_CHECKING:  # pragma: no cover - typing only
    from .autoscan import Template

LogSink = Callable[[dict], None] | None

MIN_CLUSTER_POINTS = 3


@dataclass(frozen=True)
class DetectionParams:
    voxel_size: float = 0.005
    outlier_k: int = 50
    outlier_mult: float = 1.0
    inlier_radius: float = 0.010
    accept_threshold: float = 0.6
    icp_max_iterations: int = 50
    icp_cutoff: float = 0.020
    icp_epsilon: float = 1e-6

    def __post_init__(self):
        positive = ("voxel_size", "outlier_k", "outlier_mult", "inlier_radius",
                    "accept_threshold", "icp_max_iterations", "icp_cutoff",
                    "icp_epsilon")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.accept_threshold > 1.0:
            raise ValueError("accept_threshold must not exceed 1")

    @staticmethod
    def from_config(cfg: dict | None) -> "DetectionParams":
        """Build from the scenario's optional ``perception`` block."""
        if not cfg:
            return DetectionParams()
        known = {f for f in DetectionParams.__dataclass_fields__}
        unknown = set(cfg) - known
        if unknown:
            raise ValueError(f"perception: unknown keys {sorted(unknown)}")
        return DetectionParams(**cfg)


class FailureReason(Enum):
    NO_POINTS = "NoPoints"
    LOW_SCORE = "LowScore"
    ICP_DIVERGED = "IcpDiverged"


@dataclass(frozen=True)
class Detection:
    object_id: str
    pose: Pose
    template_id: int
    score: float
    icp_rmse: float
    converged: bool


@dataclass(frozen=True)
class DetectionFailure:
    object_id: str
    reason: FailureReason
    detail: str = ""


# ---------------------------------------------------------------------------
# Preprocessing filters
# ---------------------------------------------------------------------------

def crop_to_region(c: PointCloud, region: Aabb, margin: float = 0.0) -> PointCloud:
    """Keep exactly the points inside the region grown by margin."""
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    if len(c) == 0:
        return c
    return c.select(region.contains(c.positions, margin))


def voxel_downsample(c: PointCloud, voxel: float) -> PointCloud:
    """One point per occupied voxel at the centroid of its members.

    The grid is anchored at the coordinate origin. Colors and normals are
    averaged (normals renormalized); output voxels appear in order of
    first occurrence so the result is independent of hash layouts.
    """
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    n = len(c)
    if n == 0:
        return c
    keys = np.floor(c.positions / voxel).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    groups = len(uniq)
    counts = np.bincount(inverse, minlength=groups).astype(np.float64)

    first = np.full(groups, n, dtype=np.int64)
    np.minimum.at(first, inverse, np.arange(n))
    order = np.argsort(first, kind="stable")
    rank = np.empty(groups, dtype=np.int64)
    rank[order] = np.arange(groups)

    def grouped_mean(values: np.ndarray) -> np.ndarray:
        acc = np.zeros((groups, values.shape[1]))
        np.add.at(acc, inverse, values)
        return acc / counts[:, None]

    positions = grouped_mean(c.positions)[order]
    colors = grouped_mean(c.colors)[order] if c.colors is not None else None

    normals = None
    valid = None
    if c.normals is not None:
        acc = np.zeros((groups, 3))
        member_valid = c.normals_valid
        np.add.at(acc, inverse[member_valid], c.normals[member_valid])
        lens = np.linalg.norm(acc, axis=1)
        valid = lens > 1e-12
        normals = np.zeros((groups, 3))
        normals[valid] = acc[valid] / lens[valid, None]
        normals = normals[order]
        valid = valid[order]

    return PointCloud(positions, colors, normals, valid, c.viewpoint)


def remove_statistical_outliers(c: PointCloud, k: int, mult: float) -> PointCloud:
    """Drop points whose mean k-NN distance exceeds mean + mult * std.

    Order preserving; the kept set is a subset of the input. A cloud with
    k or fewer points is returned unchanged with a warning.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    n = len(c)
    if n <= k:
        warnings.warn(f"outlier filter skipped: cloud has {n} points, needs > {k}",
                      stacklevel=2)
        return c
    tree = cKDTree(c.positions)
    dists, _ = tree.query(c.positions, k=k + 1)
    mean_d = dists[:, 1:].mean(axis=1)  # column 0 is the point itself
    threshold = mean_d.mean() + mult * mean_d.std()
    return c.select(mean_d <= threshold)


# ---------------------------------------------------------------------------
# Clustering and template matching
# ---------------------------------------------------------------------------

def cluster_labels(positions: np.ndarray, radius: float) -> np.ndarray:
    """Connected-component label per point (edges = pairs within radius)."""
    n = len(positions)
    tree = cKDTree(positions)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    graph = coo_matrix(
        (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return labels


@dataclass(frozen=True)
class TemplateMatch:
    template_id: int
    pose: Pose           # coarse object-to-scene hypothesis
    score: float
    cluster: int


def match_templates(scene: PointCloud, templates: Sequence["Template"],
                    params: DetectionParams) -> list[TemplateMatch]:
    """Score every template against every scene cluster.

    The template snapshot is rotated by the orientation its viewpoint
    implies given the scene camera, then translated so its centroid lands
    on the cluster centroid. The score is the fraction of template points
    with a scene neighbor within the inlier radius. Results are sorted by
    score descending, ties by template id ascending.
    """
    if len(scene) == 0 or not templates:
        return []
    labels = cluster_labels(scene.positions, 2.0 * params.voxel_size)
    tree = cKDTree(scene.positions)
    scene_rot = scene.viewpoint.rotation if scene.viewpoint is not None else np.eye(3)

    centroids = []
    for label in np.unique(labels):
        members = labels == label
        if int(members.sum()) >= MIN_CLUSTER_POINTS:
            centroids.append((int(label), scene.positions[members].mean(axis=0)))

    matches: list[TemplateMatch] = []
    for tpl in templates:
        # Same relative camera-object geometry as at capture time.
        rot = Pose.from_rt(scene_rot @ tpl.viewpoint.rotation.T, (0, 0, 0))
        pts_rot = rot.apply(tpl.snapshot.positions)
        centroid_rot = pts_rot.mean(axis=0)
        for label, target in centroids:
            offset = target - centroid_rot
            d, _ = tree.query(pts_rot + offset)
            score = float(np.mean(d <= params.inlier_radius))
            matches.append(TemplateMatch(
                tpl.template_id, Pose(rot.q, offset), score, label))
    matches.sort(key=lambda m: (-m.score, m.template_id, m.cluster))
    return matches


# ---------------------------------------------------------------------------
# ICP refinement
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IcpResult:
    pose: Pose
    rmse: float
    converged: bool
    iterations: int
    detail: str = ""


def icp_refine(template: PointCloud, scene: PointCloud, init: Pose,
               params: DetectionParams) -> IcpResult:
    """Point-to-point ICP from ``init``; returns template-to-scene pose.

    Each sweep pairs every template point with its nearest scene point,
    drops pairs beyond the correspondence cutoff, and applies the
    least-squares rigid update. Stops when the pose update falls below
    epsilon (translation plus 0.1 * rotation angle, meters) or the
    iteration budget runs out.
    """
    if len(template) == 0 or len(scene) == 0:
        return IcpResult(init, math.inf, False, 0, "empty cloud")
    tree = cKDTree(scene.positions)
    pose = init
    rmse = math.inf
    for it in range(1, params.icp_max_iterations + 1):
        moved = pose.apply(template.positions)
        d, idx = tree.query(moved)
        keep = d <= params.icp_cutoff
        if int(keep.sum()) < 3:
            return IcpResult(pose, math.inf, False, it,
                             f"{int(keep.sum())} correspondences survive cutoff")
        src = moved[keep]
        dst = scene.positions[idx[keep]]
        try:
            delta = best_rigid_transform(src, dst)
        except ValueError as exc:
            return IcpResult(pose, math.inf, False, it, str(exc))
        pose = compose(delta, pose)
        res = delta.apply(src) - dst
        rmse = float(np.sqrt(np.mean(np.sum(res * res, axis=1))))
        ang, dist = pose_delta(Pose.identity(), delta)
        if dist + 0.1 * ang < params.icp_epsilon:
            return IcpResult(pose, rmse, True, it)
    return IcpResult(pose, rmse, False, params.icp_max_iterations,
                     "iteration budget exhausted")


# ---------------------------------------------------------------------------
# End-to-end detection
# ---------------------------------------------------------------------------

def _emit(log: LogSink, record: dict) -> None:
    if log is not None:
        log(record)


def detect(scene_raw: PointCloud, object_id: str, templates: Sequence["Template"],
           region: Aabb, params: DetectionParams,
           log: LogSink = None) -> Detection | DetectionFailure:
    """Crop, filter, match and refine; emit a Detection or a typed failure.

    A Detection is produced only when the best match clears the accept
    threshold and ICP converges.
    """
    if not templates:
        raise ValueError(f"no templates for object {object_id!r}")

    cropped = crop_to_region(scene_raw, region, margin=0.0)
    _emit(log, {"stage": "crop", "object": object_id,
                "points_in": len(scene_raw), "points_out": len(cropped)})
    if len(cropped) == 0:
        return DetectionFailure(object_id, FailureReason.NO_POINTS, "empty crop")

    sampled = voxel_downsample(cropped, params.voxel_size)
    _emit(log, {"stage": "voxel", "object": object_id,
                "points_in": len(cropped), "points_out": len(sampled)})

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cleaned = remove_statistical_outliers(sampled, params.outlier_k,
                                              params.outlier_mult)
    _emit(log, {"stage": "outliers", "object": object_id,
                "points_in": len(sampled), "points_out": len(cleaned)})
    if len(cleaned) == 0:
        return DetectionFailure(object_id, FailureReason.NO_POINTS,
                                "no points survive filtering")

    matches = match_templates(cleaned, templates, params)
    if not matches:
        return DetectionFailure(object_id, FailureReason.LOW_SCORE,
                                "no candidate clusters")
    best = matches[0]
    _emit(log, {"stage": "match", "object": object_id, "template": best.template_id,
                "score": best.score, "candidates": len(matches)})
    if best.score < params.accept_threshold:
        return DetectionFailure(
            object_id, FailureReason.LOW_SCORE,
            f"best score {best.score:.3f} < {params.accept_threshold}")

    tpl = next(t for t in templates if t.template_id == best.template_id)
    icp = icp_refine(tpl.snapshot, cleaned, best.pose, params)
    _emit(log, {"stage": "icp", "object": object_id, "rmse": icp.rmse,
                "converged": icp.converged, "iterations": icp.iterations})
    if not icp.converged:
        return DetectionFailure(object_id, FailureReason.ICP_DIVERGED, icp.detail)

    return Detection(object_id, icp.pose, best.template_id, best.score,
                     icp.rmse, True)
