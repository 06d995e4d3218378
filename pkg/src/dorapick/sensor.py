"""Synthetic RGBD camera: ray-cast rendering, range clamp, noise, dropout.

The camera uses the computer-vision frame (+Z forward, +X right, +Y down,
pixel rows top to bottom). One candidate point per pixel comes from the
nearest ray-triangle hit; hits are kept only when their distance along
the ray lies inside the depth range. Triangles belonging to transparent
instances are never rendered at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import Pose, PointCloud, empty_cloud
from .mesh import TriMesh, triangle_normals
from .scene import Workspace

RAY_CHUNK = 2048
_MISS = -1


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 640
    height: int = 480
    vfov_deg: float = 46.0
    range_min: float = 0.2
    range_max: float = 1.2

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not (0 < self.range_min < self.range_max):
            raise ValueError("depth range must satisfy 0 < min < max")

    @property
    def focal_px(self) -> float:
        return (self.height / 2.0) / math.tan(math.radians(self.vfov_deg) / 2.0)

    def ray_directions(self) -> np.ndarray:
        """Unit ray directions in the camera frame, shape (H*W, 3), row-major."""
        f = self.focal_px
        u = (np.arange(self.width) + 0.5) - self.width / 2.0
        v = (np.arange(self.height) + 0.5) - self.height / 2.0
        uu, vv = np.meshgrid(u, v)
        d = np.stack([uu / f, vv / f, np.ones_like(uu)], axis=-1).reshape(-1, 3)
        return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.002
    dropout: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if not (0.0 <= self.dropout <= 1.0):
            raise ValueError("dropout must lie in [0, 1]")


@dataclass(frozen=True)
class RenderEntity:
    key: str
    corners: np.ndarray  # (T, 3, 3) world space
    color: np.ndarray


@dataclass
class RaycastResult:
    """Per-pixel hit data in row-major image layout."""
    t: np.ndarray           # (H, W) distance along the unit ray; inf = miss
    entity: np.ndarray      # (H, W) index into entities; -1 = miss
    triangle: np.ndarray    # (H, W) triangle index within the soup
    directions: np.ndarray  # (H*W, 3) world-frame unit rays
    origin: np.ndarray
    zdepth: np.ndarray      # (H, W) distance along the optical axis; NaN = miss

    def depth_image(self) -> np.ndarray:
        return self.zdepth

    def hit_mask(self) -> np.ndarray:
        return np.isfinite(self.t)


def workspace_entities(ws: Workspace, only: set[str] | None = None) -> list[RenderEntity]:
    """Renderable triangle soups; transparent instances are invisible."""
    out = []
    for e in ws.static_entries():
        if only is not None and e.name not in only:
            continue
        out.append(RenderEntity(e.name, e.pose.apply(
            e.mesh.corners().reshape(-1, 3)).reshape(-1, 3, 3), e.color))
    for inst in ws.instances:
        if only is not None and inst.id not in only:
            continue
        model = ws.model_of(inst)
        if model.material.transparent:
            continue
        out.append(RenderEntity(inst.id, inst.pose.apply(
            model.mesh.corners().reshape(-1, 3)).reshape(-1, 3, 3), model.color))
    return out


def mesh_entity(mesh: TriMesh, pose: Pose | None = None, key: str = "mesh",
                color=(0.7, 0.7, 0.7)) -> RenderEntity:
    corners = mesh.corners()
    if pose is not None:
        corners = pose.apply(corners.reshape(-1, 3)).reshape(-1, 3, 3)
    return RenderEntity(key, corners, np.asarray(color, dtype=np.float64))


def _cull_triangles(corners_cam: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Indices of triangles that can possibly be hit within the frustum."""
    lo = corners_cam.min(axis=1)
    hi = corners_cam.max(axis=1)
    keep = hi[:, 2] > 0.0
    # Range ball: closest AABB point to the camera must be within range_max.
    closest = np.clip(0.0, lo, hi)
    keep &= np.sqrt((closest ** 2).sum(axis=1)) <= intr.range_max
    # Side planes (conservative: reject only if the whole box is outside).
    f = intr.focal_px
    tx = (intr.width / 2.0) / f
    ty = (intr.height / 2.0) / f
    margin = 1e-9
    z_hi = np.maximum(hi[:, 2], 0.0)
    keep &= ~(lo[:, 0] > z_hi * tx + margin)
    keep &= ~(hi[:, 0] < -(z_hi * tx) - margin)
    keep &= ~(lo[:, 1] > z_hi * ty + margin)
    keep &= ~(hi[:, 1] < -(z_hi * ty) - margin)
    return np.nonzero(keep)[0]


def raycast(entities: list[RenderEntity], camera: Pose,
            intr: CameraIntrinsics) -> RaycastResult:
    """Nearest-hit ray cast of every pixel against every entity triangle."""
    h, w = intr.height, intr.width
    dirs_cam = intr.ray_directions()
    rot = camera.rotation
    dirs = dirs_cam @ rot.T
    origin = camera.t

    t_img = np.full(h * w, np.inf)
    ent_img = np.full(h * w, _MISS, dtype=np.int32)
    tri_img = np.full(h * w, _MISS, dtype=np.int32)

    if entities:
        corners = np.concatenate([e.corners for e in entities], axis=0)
        ent_of_tri = np.concatenate([
            np.full(len(e.corners), i, dtype=np.int32) for i, e in enumerate(entities)
        ])
        corners_cam = ((corners.reshape(-1, 3) - origin) @ rot).reshape(-1, 3, 3)
        visible = _cull_triangles(corners_cam, intr)
        if len(visible):
            sub = corners[visible]
            sub_ent = ent_of_tri[visible]
            v0 = sub[:, 0]
            e1 = sub[:, 1] - v0
            e2 = sub[:, 2] - v0
            tvec = origin - v0                       # (T, 3) shared ray origin
            qvec = np.cross(tvec, e1)                # (T, 3)
            t_num = np.einsum("tj,tj->t", e2, qvec)  # (T,)
            for s in range(0, h * w, RAY_CHUNK):
                d = dirs[s:s + RAY_CHUNK]                        # (R, 3)
                pvec = np.cross(d[:, None, :], e2[None, :, :])   # (R, T, 3)
                det = np.einsum("tj,rtj->rt", e1, pvec)
                with np.errstate(divide="ignore", invalid="ignore"):
                    inv = 1.0 / det
                    u = np.einsum("tj,rtj->rt", tvec, pvec) * inv
                    vv = (d @ qvec.T) * inv
                    tt = t_num[None, :] * inv
                ok = (np.abs(det) > 1e-14) & (u >= 0) & (vv >= 0) & (u + vv <= 1)
                ok &= (tt >= intr.range_min) & (tt <= intr.range_max)
                tt = np.where(ok, tt, np.inf)
                best = np.argmin(tt, axis=1)
                rows = np.arange(len(d))
                best_t = tt[rows, best]
                hit = np.isfinite(best_t)
                idx = s + rows[hit]
                t_img[idx] = best_t[hit]
                tri_img[idx] = visible[best[hit]]
                ent_img[idx] = sub_ent[best[hit]]

    zdepth = t_img * dirs_cam[:, 2]
    zdepth[~np.isfinite(t_img)] = np.nan
    return RaycastResult(
        t=t_img.reshape(h, w),
        entity=ent_img.reshape(h, w),
        triangle=tri_img.reshape(h, w),
        directions=dirs,
        origin=origin,
        zdepth=zdepth.reshape(h, w),
    )


def cloud_from_raycast(entities: list[RenderEntity], res: RaycastResult,
                       camera: Pose) -> PointCloud:
    flat_t = res.t.ravel()
    hit = np.isfinite(flat_t)
    if not hit.any():
        return empty_cloud(viewpoint=camera)
    t = flat_t[hit]
    d = res.directions[hit]
    positions = res.origin + t[:, None] * d

    all_corners = np.concatenate([e.corners for e in entities], axis=0)
    normals_all = triangle_normals(all_corners)
    tri = res.triangle.ravel()[hit]
    normals = normals_all[tri].copy()
    flip = np.einsum("ij,ij->i", normals, d) > 0
    normals[flip] *= -1.0

    colors = np.stack([np.asarray(e.color) for e in entities])
    ent = res.entity.ravel()[hit]
    return PointCloud(positions, colors[ent], normals,
                      np.ones(len(positions), dtype=bool), viewpoint=camera)


def render(ws: Workspace, camera: Pose, intr: CameraIntrinsics) -> PointCloud:
    """Render the workspace to a cloud expressed in the workspace frame."""
    entities = workspace_entities(ws)
    res = raycast(entities, camera, intr)
    return cloud_from_raycast(entities, res, camera)


def render_depth(ws: Workspace, camera: Pose, intr: CameraIntrinsics) -> np.ndarray:
    """Z-depth image in meters (NaN where no hit); for the debug PGM dump."""
    return raycast(workspace_entities(ws), camera, intr).depth_image()


def apply_noise(c: PointCloud, nm: NoiseModel) -> PointCloud:
    """Along-ray Gaussian depth noise plus i.i.d. dropout.

    Uses a counter-based generator (Philox) keyed on the seed, so the
    perturbation of point i never depends on how many other points exist
    or in which order they are processed.
    """
    if len(c) == 0:
        return c
    if nm.sigma == 0.0 and nm.dropout == 0.0:
        return c
    if c.viewpoint is None:
        raise ValueError("cloud has no viewpoint; cannot perturb along rays")
    rng = np.random.Generator(np.random.Philox(key=nm.seed))
    u = rng.random(len(c))
    depth_noise = rng.normal(0.0, nm.sigma, len(c)) if nm.sigma > 0 else np.zeros(len(c))
    keep = u >= nm.dropout
    rays = c.positions - c.viewpoint.t
    lens = np.linalg.norm(rays, axis=1, keepdims=True)
    rays = rays / np.maximum(lens, 1e-12)
    moved = PointCloud(
        c.positions + depth_noise[:, None] * rays,
        c.colors, c.normals, c.normals_valid, c.viewpoint,
    )
    return moved.select(keep)


def visibility_fraction(ws: Workspace, camera: Pose, intr: CameraIntrinsics,
                        target: str) -> float:
    """Visible fraction of the target: first hits now / hits with no other
    instances in the scene. Transparent targets are never visible."""
    inst = ws.instance(target)
    if ws.model_of(inst).material.transparent:
        return 0.0

    full_entities = workspace_entities(ws)
    keys = [e.key for e in full_entities]
    target_idx = keys.index(target)
    full = raycast(full_entities, camera, intr)
    numer = int(np.count_nonzero(full.entity == target_idx))

    statics = {e.name for e in ws.static_entries()}
    solo_entities = workspace_entities(ws, only=statics | {target})
    solo_keys = [e.key for e in solo_entities]
    solo_idx = solo_keys.index(target)
    solo = raycast(solo_entities, camera, intr)
    denom = int(np.count_nonzero(solo.entity == solo_idx))
    if denom == 0:
        return 0.0
    return numer / denom
