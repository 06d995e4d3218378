"""Object autoscanning: hemisphere viewpoints, snapshot capture, stitching.

A lone object is rendered from viewpoints sampled on an upper hemisphere;
because the camera poses are known exactly, snapshots stitch into a merged
model with no registration step. The same snapshots, kept individually
with their capture poses, form the detection template library.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .formats import load_ply, save_ply
from .geom import PointCloud, Pose, concat_clouds, look_at
from .perception import voxel_downsample
from .scene import ObjectModel, pose_from_list, pose_to_list
from .sensor import (CameraIntrinsics, NoiseModel, apply_noise,
                     cloud_from_raycast, mesh_entity, raycast)

DEFAULT_SCAN_RADIUS = 0.6
MERGE_VOXEL = 0.003
SNAPSHOT_VOXEL = 0.003
MAX_TEMPLATES_PER_OBJECT = 128
LIBRARY_VERSION = 1

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


class ScanImpossibleError(RuntimeError):
    """The object cannot be scanned (it is invisible to the depth sensor)."""


class LibraryFormatError(RuntimeError):
    """A template library on disk is unreadable or has the wrong version."""


@dataclass(frozen=True)
class Template:
    object_id: str
    template_id: int
    viewpoint: Pose          # camera pose in the object frame
    snapshot: PointCloud     # partial view, object frame


@dataclass
class TemplateLibrary:
    radius: float = DEFAULT_SCAN_RADIUS
    _templates: dict[str, list[Template]] = field(default_factory=dict)

    def object_ids(self) -> list[str]:
        return sorted(self._templates)

    def count(self, object_id: str) -> int:
        return len(self._templates.get(object_id, []))

    def for_object(self, object_id: str) -> list[Template]:
        if object_id not in self._templates:
            raise KeyError(f"no templates for object {object_id!r}")
        return list(self._templates[object_id])

    def has_object(self, object_id: str) -> bool:
        return object_id in self._templates

    def add_many(self, templates: list[Template]) -> None:
        for t in templates:
            bucket = self._templates.setdefault(t.object_id, [])
            if any(x.template_id == t.template_id for x in bucket):
                raise ValueError(
                    f"duplicate template id {t.template_id} for {t.object_id!r}")
            if len(bucket) >= MAX_TEMPLATES_PER_OBJECT:
                warnings.warn(
                    f"{t.object_id}: template cap {MAX_TEMPLATES_PER_OBJECT} "
                    "reached; extra templates dropped", stacklevel=2)
                continue
            bucket.append(t)


# ---------------------------------------------------------------------------
# Viewpoints and scanning
# ---------------------------------------------------------------------------

def hemisphere_viewpoints(radius: float, count: int) -> list[Pose]:
    """Camera poses on the upper hemisphere, all looking at the origin.

    Spacing follows a Fibonacci lattice offset so every sample keeps z > 0;
    a single viewpoint degenerates to the straight top-down pose. The
    up-vector convention is gravity-aligned (+Z projected), falling back
    to +X at the pole, so equal azimuths always share their roll.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if count < 1:
        raise ValueError("count must be at least 1")
    if count == 1:
        return [look_at((0.0, 0.0, radius), (0.0, 0.0, 0.0))]
    poses = []
    for i in range(count):
        z = 1.0 - (i + 0.5) / count
        rho = math.sqrt(max(0.0, 1.0 - z * z))
        phi = i * GOLDEN_ANGLE
        eye = radius * np.array([rho * math.cos(phi), rho * math.sin(phi), z])
        poses.append(look_at(eye, (0.0, 0.0, 0.0)))
    return poses


def _snapshot(model: ObjectModel, viewpoint: Pose, intr: CameraIntrinsics,
              noise: NoiseModel | None) -> PointCloud:
    entity = mesh_entity(model.mesh, key=model.id, color=model.color)
    res = raycast([entity], viewpoint, intr)
    cloud = cloud_from_raycast([entity], res, viewpoint)
    if noise is not None:
        cloud = apply_noise(cloud, noise)
    return cloud


def scan_object(model: ObjectModel, viewpoints: list[Pose],
                intr: CameraIntrinsics,
                noise: NoiseModel | None = None) -> PointCloud:
    """Merged cloud of a lone object, stitched by the known camera poses.

    The support surface is a transparent board and contributes nothing.
    Raises ScanImpossibleError for transparent objects.
    """
    if model.material.transparent:
        raise ScanImpossibleError(f"{model.id} is invisible to the depth sensor")
    snapshots = [_snapshot(model, vp, intr, noise) for vp in viewpoints]
    merged = concat_clouds(snapshots, viewpoint=None)
    return voxel_downsample(merged, MERGE_VOXEL)


def generate_templates(model: ObjectModel, count: int, intr: CameraIntrinsics,
                       radius: float = DEFAULT_SCAN_RADIUS,
                       snapshot_voxel: float = SNAPSHOT_VOXEL) -> list[Template]:
    """Noiseless snapshot templates from ``count`` hemisphere viewpoints.

    Template ids are viewpoint indices. Empty snapshots (grazing views)
    are skipped with a warning; an entirely empty scan is an error.
    """
    if not (1 <= count <= MAX_TEMPLATES_PER_OBJECT):
        raise ValueError(f"count must be in 1..{MAX_TEMPLATES_PER_OBJECT}")
    if model.material.transparent:
        raise ScanImpossibleError(f"{model.id} is invisible to the depth sensor")
    templates = []
    for i, vp in enumerate(hemisphere_viewpoints(radius, count)):
        cloud = _snapshot(model, vp, intr, noise=None)
        if len(cloud) == 0:
            warnings.warn(f"{model.id}: viewpoint {i} produced an empty snapshot",
                          stacklevel=2)
            continue
        if snapshot_voxel:
            cloud = voxel_downsample(cloud, snapshot_voxel)
        templates.append(Template(model.id, i, vp, cloud.with_viewpoint(vp)))
    if not templates:
        raise ScanImpossibleError(f"{model.id}: every snapshot came back empty")
    return templates


# ---------------------------------------------------------------------------
# Library persistence: manifest.json plus one PLY per snapshot
# ---------------------------------------------------------------------------

def save_library(lib: TemplateLibrary, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"version": LIBRARY_VERSION, "radius": lib.radius, "objects": {}}
    for oid in lib.object_ids():
        entries = []
        for tpl in lib.for_object(oid):
            fname = f"{oid}_{tpl.template_id:04d}.ply"
            save_ply(tpl.snapshot, root / fname)
            entries.append({
                "template_id": tpl.template_id,
                "viewpoint": pose_to_list(tpl.viewpoint),
                "snapshot": fname,
            })
        manifest["objects"][oid] = entries
    (root / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def load_library(path) -> TemplateLibrary:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise LibraryFormatError(f"{manifest_path}: not found")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise LibraryFormatError(f"{manifest_path}: corrupt manifest ({exc})") from exc
    version = manifest.get("version")
    if version != LIBRARY_VERSION:
        raise LibraryFormatError(
            f"{manifest_path}: version {version!r}, expected {LIBRARY_VERSION}")
    lib = TemplateLibrary(radius=float(manifest.get("radius", DEFAULT_SCAN_RADIUS)))
    for oid, entries in sorted(manifest.get("objects", {}).items()):
        templates = []
        for e in entries:
            snap_path = root / e["snapshot"]
            if not snap_path.exists():
                raise LibraryFormatError(f"{snap_path}: snapshot file missing")
            vp = pose_from_list(e["viewpoint"], f"{manifest_path}:{oid}")
            cloud = load_ply(snap_path).with_viewpoint(vp)
            templates.append(Template(oid, int(e["template_id"]), vp, cloud))
        lib.add_many(templates)
    return lib
