"""The simulated workspace: 12-bin shelf, table, container, placed objects.

Also the home of the collision oracle used by grasp and motion planning
(pairwise mesh collision, swept path collision, minimum separation) and
of the exit-travel arithmetic shared by pre-grasp computation and grasp
feasibility.

A Workspace is a value. Mutators return a new Workspace; queries never
modify anything, so frozen snapshots can be shared across workers.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import collision
from .collision import TriangleSoup
from .geom import (Aabb, Pose, invert, quat_angle, quat_conj, quat_mul,
                   quat_slerp, vec3)
from .mesh import TriMesh, box_mesh, merge_meshes

Location = int | str  # bin id (0..11), "table" or "container"

BIN_COUNT = 12
BIN_GRID = (4, 3)  # rows x columns
DEFAULT_WALL_THICKNESS = 0.01
SWEEP_STEP_TRANSLATION = 0.005          # m between interpolated collision checks
SWEEP_STEP_ROTATION = math.radians(2.0)
TABLE_CLEARANCE = 0.02                  # pre-grasp keep-out height above the table
CONTAINMENT_TOL = 1e-3
EXIT_EPS = 1e-6                         # strict clearance past the exit plane

STATIC_COLOR = vec3(0.45, 0.45, 0.45)


class ScenarioError(ValueError):
    """Malformed scenario configuration; message names the offending entry."""


# ---------------------------------------------------------------------------
# Materials and object models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaterialFlags:
    transparent: bool = False
    suction_compatible: bool = True
    deformable: bool = False


@dataclass(frozen=True)
class ObjectModel:
    """Geometry plus the metadata that drives grasp feasibility."""

    id: str
    mesh: TriMesh
    mass: float
    material: MaterialFlags
    color: np.ndarray
    min_thickness: float
    max_extent: float
    display_name: str = ""
    in_capability_table: bool = True

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError(f"object {self.id}: mass must be positive")
        if self.min_thickness > self.max_extent:
            raise ValueError(f"object {self.id}: min_thickness > max_extent")
        c = np.asarray(self.color, dtype=np.float64).reshape(3)
        c.flags.writeable = False
        object.__setattr__(self, "color", c)

    @staticmethod
    def from_spec(entry: dict, path: str = "object") -> "ObjectModel":
        try:
            extents = np.asarray(entry["extents"], dtype=np.float64).reshape(3)
            mat = entry.get("material", {})
            return ObjectModel(
                id=entry["id"],
                mesh=box_mesh(extents),
                mass=float(entry["mass"]),
                material=MaterialFlags(
                    transparent=bool(mat.get("transparent", False)),
                    suction_compatible=bool(mat.get("suction_compatible", True)),
                    deformable=bool(mat.get("deformable", False)),
                ),
                color=np.asarray(entry.get("color", [0.7, 0.7, 0.2]), dtype=np.float64),
                min_thickness=float(np.min(extents)),
                max_extent=float(np.max(extents)),
                display_name=entry.get("name", entry["id"]),
                in_capability_table=bool(entry.get("in_capability_table", True)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"{path}: {exc}") from exc

    @property
    def extents(self) -> np.ndarray:
        return self.mesh.aabb().extents


def resting_pose(model: ObjectModel, x: float, y: float, yaw: float,
                 support_z: float) -> Pose:
    """Pose of a box-like object resting upright on a horizontal surface."""
    half_height = 0.5 * float(model.extents[2])
    return Pose.from_axis_angle((0, 0, 1), yaw, (x, y, support_z + half_height))


# ---------------------------------------------------------------------------
# Gripper volume (collision envelope)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GripperVolume:
    """Box envelope of the hand in the tool frame.

    Tool frame: +Z is the approach direction, the fingertip plane is z = 0
    and the body extends behind it (z in [-depth, 0]).
    """

    closed_dims: tuple[float, float, float]
    open_dims: tuple[float, float, float]

    def __post_init__(self):
        if any(c > o + 1e-12 for c, o in zip(self.closed_dims, self.open_dims)):
            raise ValueError("closed_dims must not exceed open_dims")

    def mesh(self, open_state: bool = True) -> TriMesh:
        w, h, d = self.open_dims if open_state else self.closed_dims
        return box_mesh((w, h, d), center=(0.0, 0.0, -0.5 * d))


# ---------------------------------------------------------------------------
# Bins and the shelf
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Bin:
    """One shelf compartment.

    Bin frame: origin at the center of the opening, +Z points out of the
    bin toward the robot, +Y up, +X across the opening. The cavity spans
    z in [-depth, 0].
    """

    id: int
    pose: Pose
    inner_dims: tuple[float, float, float]   # width, height, depth
    opening: tuple[float, float]             # width, height
    wall_thickness: float = DEFAULT_WALL_THICKNESS

    def __post_init__(self):
        if not (0 <= self.id < BIN_COUNT):
            raise ValueError(f"bin id {self.id} out of range")
        w, h, _ = self.inner_dims
        ow, oh = self.opening
        if ow > w + 1e-12 or oh > h + 1e-12:
            raise ValueError(f"bin {self.id}: opening exceeds inner dims")

    def interior(self) -> Aabb:
        """Cavity box in the bin frame."""
        w, h, d = self.inner_dims
        return Aabb((-0.5 * w, -0.5 * h, -d), (0.5 * w, 0.5 * h, 0.0))

    def walls_mesh(self) -> TriMesh:
        w, h, d = self.inner_dims
        ow, oh = self.opening
        th = self.wall_thickness
        panels = [
            # back
            box_mesh((w + 2 * th, h + 2 * th, th), (0, 0, -d - 0.5 * th)),
            # left / right
            box_mesh((th, h + 2 * th, d), (-0.5 * (w + th), 0, -0.5 * d)),
            box_mesh((th, h + 2 * th, d), (0.5 * (w + th), 0, -0.5 * d)),
            # bottom / top
            box_mesh((w, th, d), (0, -0.5 * (h + th), -0.5 * d)),
            box_mesh((w, th, d), (0, 0.5 * (h + th), -0.5 * d)),
        ]
        # Front lip: the frame between the opening and the inner cross-section,
        # recessed one wall thickness into the cavity.
        if ow < w - 1e-9:
            lip_w = 0.5 * (w - ow)
            panels.append(box_mesh((lip_w, h, th), (-0.5 * (ow + lip_w), 0, -0.5 * th)))
            panels.append(box_mesh((lip_w, h, th), (0.5 * (ow + lip_w), 0, -0.5 * th)))
        if oh < h - 1e-9:
            lip_h = 0.5 * (h - oh)
            panels.append(box_mesh((ow, lip_h, th), (0, -0.5 * (oh + lip_h), -0.5 * th)))
            panels.append(box_mesh((ow, lip_h, th), (0, 0.5 * (oh + lip_h), -0.5 * th)))
        return merge_meshes(panels)


# ---------------------------------------------------------------------------
# Workspace
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Instance:
    id: str
    object_id: str
    pose: Pose
    location: Location


@dataclass(frozen=True)
class StaticEntry:
    name: str
    mesh: TriMesh
    pose: Pose
    color: np.ndarray


@dataclass
class Workspace:
    bins: tuple[Bin, ...]
    table: Aabb
    container: Aabb
    objects: dict[str, ObjectModel]
    instances: tuple[Instance, ...]
    robot_base: Pose
    reach_radius: float
    config: dict = field(default_factory=dict, repr=False)
    _soups: dict = field(default_factory=dict, repr=False, compare=False)

    # -- lookups ----------------------------------------------------------

    def instance(self, instance_id: str) -> Instance:
        for inst in self.instances:
            if inst.id == instance_id:
                return inst
        raise KeyError(f"unknown instance {instance_id!r}")

    def has_instance(self, instance_id: str) -> bool:
        return any(inst.id == instance_id for inst in self.instances)

    def model_of(self, inst: Instance) -> ObjectModel:
        return self.objects[inst.object_id]

    def bin(self, bin_id: int) -> Bin:
        for b in self.bins:
            if b.id == bin_id:
                return b
        raise KeyError(f"unknown bin {bin_id}")

    def table_region(self) -> Aabb:
        """The volume where table-resting objects live."""
        return Aabb(
            (self.table.lo[0], self.table.lo[1], self.table.hi[2]),
            (self.table.hi[0], self.table.hi[1], self.table.hi[2] + 0.6),
        )

    def container_region(self) -> Aabb:
        return Aabb(
            (self.container.lo[0], self.container.lo[1], self.container.lo[2]),
            (self.container.hi[0], self.container.hi[1], self.container.hi[2] + 0.6),
        )

    def location_region(self, location: Location) -> Aabb:
        if location == "table":
            return self.table_region()
        if location == "container":
            return self.container_region()
        return _world_interior_aabb(self.bin(int(location)))

    def within_reach(self, point, margin: float = 0.0) -> bool:
        p = np.asarray(point, dtype=np.float64)
        return float(np.linalg.norm(p - self.robot_base.t)) <= self.reach_radius + margin

    # -- geometry ---------------------------------------------------------

    def static_entries(self) -> list[StaticEntry]:
        entries = [
            StaticEntry(f"bin{b.id}", b.walls_mesh(), b.pose, STATIC_COLOR)
            for b in self.bins
        ]
        entries.append(StaticEntry(
            "table", box_mesh(self.table.extents, self.table.center),
            Pose.identity(), STATIC_COLOR))
        entries.append(StaticEntry(
            "container", box_mesh(self.container.extents, self.container.center),
            Pose.identity(), STATIC_COLOR))
        return entries

    def instance_world_mesh(self, inst: Instance) -> TriMesh:
        return self.model_of(inst).mesh.transformed(inst.pose)

    def instance_world_aabb(self, inst: Instance) -> Aabb:
        return self.instance_world_mesh(inst).aabb()

    def _static_soups(self) -> list[TriangleSoup]:
        if "static" not in self._soups:
            self._soups["static"] = [
                TriangleSoup.of(e.mesh, e.pose) for e in self.static_entries()
            ]
        return self._soups["static"]

    def _instance_soup(self, inst: Instance) -> TriangleSoup:
        key = ("inst", inst.id)
        if key not in self._soups:
            self._soups[key] = TriangleSoup.of(self.model_of(inst).mesh, inst.pose)
        return self._soups[key]

    def obstacle_soups(self, ignore: tuple[str, ...] = ()) -> list[TriangleSoup]:
        soups = list(self._static_soups())
        for inst in self.instances:
            if inst.id not in ignore:
                soups.append(self._instance_soup(inst))
        return soups

    # -- mutation (value style) -------------------------------------------

    def _with_instances(self, instances: tuple[Instance, ...]) -> "Workspace":
        return replace(self, instances=instances, _soups={})

    def without_instance(self, instance_id: str) -> "Workspace":
        self.instance(instance_id)  # raise on unknown id
        return self._with_instances(
            tuple(i for i in self.instances if i.id != instance_id))

    def with_instance_pose(self, instance_id: str, pose: Pose,
                           location: Location | None = None) -> "Workspace":
        out = []
        for inst in self.instances:
            if inst.id == instance_id:
                loc = inst.location if location is None else location
                out.append(Instance(inst.id, inst.object_id, pose, loc))
            else:
                out.append(inst)
        return self._with_instances(tuple(out))

    def with_added_instance(self, inst: Instance) -> "Workspace":
        if self.has_instance(inst.id):
            raise ValueError(f"duplicate instance id {inst.id!r}")
        return self._with_instances(self.instances + (inst,))

    # -- digest -----------------------------------------------------------

    def digest(self) -> str:
        """Stable content hash of the workspace state."""
        doc = {
            "bins": [
                {
                    "id": b.id,
                    "pose": pose_to_list(b.pose),
                    "inner_dims": list(b.inner_dims),
                    "opening": list(b.opening),
                }
                for b in self.bins
            ],
            "table": [self.table.lo.tolist(), self.table.hi.tolist()],
            "container": [self.container.lo.tolist(), self.container.hi.tolist()],
            "objects": sorted(self.objects),
            "instances": [
                {
                    "id": i.id,
                    "object": i.object_id,
                    "pose": pose_to_list(i.pose),
                    "location": i.location,
                }
                for i in self.instances
            ],
            "robot": pose_to_list(self.robot_base),
            "reach": self.reach_radius,
        }
        blob = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _world_interior_aabb(b: Bin) -> Aabb:
    interior = b.interior()
    corners = np.array([
        [x, y, z]
        for x in (interior.lo[0], interior.hi[0])
        for y in (interior.lo[1], interior.hi[1])
        for z in (interior.lo[2], interior.hi[2])
    ])
    return Aabb.of_points(b.pose.apply(corners))


def pose_to_list(p: Pose) -> list[float]:
    return [float(p.t[0]), float(p.t[1]), float(p.t[2]),
            float(p.q[0]), float(p.q[1]), float(p.q[2]), float(p.q[3])]


def pose_from_list(v, path: str = "pose") -> Pose:
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.size != 7:
        raise ScenarioError(f"{path}: expected [x, y, z, qw, qx, qy, qz]")
    try:
        return Pose(arr[3:], arr[:3])
    except ValueError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Collision oracle
# ---------------------------------------------------------------------------

def collide(a: TriMesh, pa: Pose, b: TriMesh, pb: Pose) -> bool:
    """True iff any triangle pair of the two posed meshes intersects."""
    return collision.mesh_collide(a, pa, b, pb)


def interpolate_pose(a: Pose, b: Pose, u: float) -> Pose:
    return Pose(quat_slerp(a.q, b.q, u), (1.0 - u) * a.t + u * b.t)


def densify_path(path: list[Pose], step_t: float = SWEEP_STEP_TRANSLATION,
                 step_r: float = SWEEP_STEP_ROTATION, factor: int = 1) -> list[Pose]:
    """Interpolated pose samples along the waypoint polyline.

    Each segment gets an integer number of steps, so multiplying ``factor``
    yields a strict superset of the coarser samples; refinement can only
    add collision checks, never lose one.
    """
    if not path:
        return []
    out = [path[0]]
    for a, b in zip(path, path[1:]):
        ang = quat_angle(quat_mul(quat_conj(a.q), b.q))
        dist = float(np.linalg.norm(b.t - a.t))
        n = max(1, math.ceil(dist / step_t - 1e-9), math.ceil(ang / step_r - 1e-9))
        n *= factor
        for k in range(1, n + 1):
            out.append(interpolate_pose(a, b, k / n))
    return out


def swept_collide(moving: TriMesh, path: list[Pose], ws: Workspace,
                  ignore: tuple[str, ...] = (), factor: int = 1) -> bool:
    """True iff the moving mesh collides anywhere along the densified path."""
    if not path:
        raise ValueError("path must be non-empty")
    obstacles = ws.obstacle_soups(ignore)
    for pose in densify_path(path, factor=factor):
        soup = TriangleSoup.of(moving, pose)
        for obs in obstacles:
            if collision.soups_collide(soup, obs):
                return True
    return False


def min_separation(ws: Workspace, a: str, b: str) -> float:
    """Minimum surface distance between two instances (0 if colliding)."""
    ia = ws.instance(a)
    ib = ws.instance(b)
    return collision.soups_distance(ws._instance_soup(ia), ws._instance_soup(ib))


# ---------------------------------------------------------------------------
# Exit travel (shared by grasp feasibility and pre-grasp computation)
# ---------------------------------------------------------------------------

def bin_exit_travel(b: Bin, mesh: TriMesh, pose: Pose, retreat_dir) -> float:
    """Distance along ``retreat_dir`` until the mesh clears the bin cavity.

    The only exit is through the opening plane (bin z = 0); a retreat
    direction without a meaningful outward component yields ``inf``.
    """
    d = np.asarray(retreat_dir, dtype=np.float64)
    to_bin = invert(b.pose)
    d_bin = to_bin.rotate(d)
    if d_bin[2] < 0.1:
        return math.inf
    verts = to_bin.apply(pose.apply(mesh.vertices))
    min_z = float(verts[:, 2].min())
    if min_z >= EXIT_EPS:
        return 0.0
    return (EXIT_EPS - min_z) / float(d_bin[2])


def table_exit_travel(ws: Workspace, mesh: TriMesh, pose: Pose, retreat_dir) -> float:
    """Distance until the mesh leaves the table keep-out slab.

    The slab is the table footprint extruded ``TABLE_CLEARANCE`` above the
    top. Exits are allowed upward or off any edge, never down through the
    table.
    """
    d = np.asarray(retreat_dir, dtype=np.float64)
    verts = pose.apply(mesh.vertices)
    lo = verts.min(axis=0)
    hi = verts.max(axis=0)
    slab_lo = np.array([ws.table.lo[0], ws.table.lo[1], ws.table.hi[2]])
    slab_hi = np.array([ws.table.hi[0], ws.table.hi[1],
                        ws.table.hi[2] + TABLE_CLEARANCE])
    if np.any(lo > slab_hi) or np.any(hi < slab_lo):
        return 0.0
    best = math.inf
    for axis in range(3):
        if d[axis] > 1e-9:
            best = min(best, (slab_hi[axis] + EXIT_EPS - lo[axis]) / d[axis])
        elif d[axis] < -1e-9 and axis != 2:
            best = min(best, (hi[axis] - (slab_lo[axis] - EXIT_EPS)) / -d[axis])
    return max(0.0, best)


# ---------------------------------------------------------------------------
# Scenario parsing
# ---------------------------------------------------------------------------

def _require(cfg: dict, key: str, path: str):
    if key not in cfg:
        raise ScenarioError(f"{path}: missing required key {key!r}")
    return cfg[key]


def _aabb_from(cfg, path: str) -> Aabb:
    try:
        return Aabb(np.asarray(cfg["lo"], dtype=np.float64),
                    np.asarray(cfg["hi"], dtype=np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"{path}: {exc}") from exc


def load_object_models(entries: list[dict], path: str = "objects") -> dict[str, ObjectModel]:
    models: dict[str, ObjectModel] = {}
    for i, entry in enumerate(entries):
        model = ObjectModel.from_spec(entry, f"{path}[{i}]")
        if model.id in models:
            raise ScenarioError(f"{path}[{i}]: duplicate object id {model.id!r}")
        models[model.id] = model
    return models


def build_workspace(config: dict) -> Workspace:
    """Validate a scenario description and assemble the workspace.

    Raises ScenarioError naming the offending entry for malformed input,
    wrong bin counts, overlapping static geometry, or instances that do
    not sit inside their declared location.
    """
    shelf = _require(config, "shelf", "scenario")
    bins_cfg = _require(shelf, "bins", "shelf")
    if len(bins_cfg) != BIN_COUNT:
        raise ScenarioError(f"shelf.bins: expected {BIN_COUNT} bins, got {len(bins_cfg)}")
    wall = float(shelf.get("wall_thickness", DEFAULT_WALL_THICKNESS))
    bins = []
    for i, bc in enumerate(bins_cfg):
        path = f"shelf.bins[{i}]"
        try:
            bins.append(Bin(
                id=int(_require(bc, "id", path)),
                pose=pose_from_list(_require(bc, "pose", path), f"{path}.pose"),
                inner_dims=tuple(float(x) for x in _require(bc, "inner_dims", path)),
                opening=tuple(float(x) for x in _require(bc, "opening", path)),
                wall_thickness=wall,
            ))
        except ValueError as exc:
            raise ScenarioError(f"{path}: {exc}") from exc
    if sorted(b.id for b in bins) != list(range(BIN_COUNT)):
        raise ScenarioError("shelf.bins: ids must be exactly 0..11")

    table = _aabb_from(_require(config, "table", "scenario"), "table")
    container = _aabb_from(_require(config, "container", "scenario"), "container")

    objects_cfg = _require(config, "objects", "scenario")
    if objects_cfg == "builtin":
        from .data import builtin_objects
        objects = load_object_models(builtin_objects())
    elif isinstance(objects_cfg, list):
        objects = load_object_models(objects_cfg)
    else:
        raise ScenarioError('objects: must be "builtin" or a list of object entries')

    robot = _require(config, "robot", "scenario")
    robot_base = pose_from_list(_require(robot, "base_pose", "robot"), "robot.base_pose")
    reach = float(robot.get("reach_radius", 0.85))
    if reach <= 0:
        raise ScenarioError("robot.reach_radius: must be positive")

    instances = []
    seen = set()
    for i, ic in enumerate(config.get("instances", [])):
        path = f"instances[{i}]"
        iid = _require(ic, "id", path)
        if iid in seen:
            raise ScenarioError(f"{path}: duplicate instance id {iid!r}")
        seen.add(iid)
        obj = _require(ic, "object", path)
        if obj not in objects:
            raise ScenarioError(f"{path}: unknown object {obj!r}")
        loc = _require(ic, "location", path)
        if not (loc == "table" or (isinstance(loc, int) and 0 <= loc < BIN_COUNT)):
            raise ScenarioError(f"{path}.location: must be a bin id or \"table\"")
        instances.append(Instance(
            id=iid, object_id=obj,
            pose=pose_from_list(_require(ic, "pose", path), f"{path}.pose"),
            location=loc,
        ))

    ws = Workspace(
        bins=tuple(sorted(bins, key=lambda b: b.id)),
        table=table,
        container=container,
        objects=objects,
        instances=tuple(instances),
        robot_base=robot_base,
        reach_radius=reach,
        config=config,
    )
    _validate_statics(ws)
    _validate_containment(ws)
    return ws


def _validate_statics(ws: Workspace) -> None:
    entries = ws.static_entries()
    soups = [TriangleSoup.of(e.mesh, e.pose) for e in entries]
    for i in range(len(entries)):
        for j in range(i + 1, len(entries)):
            if collision.soups_collide(soups[i], soups[j]):
                raise ScenarioError(
                    f"static geometry overlap: {entries[i].name} vs {entries[j].name}")


def _validate_containment(ws: Workspace) -> None:
    for idx, inst in enumerate(ws.instances):
        box = ws.instance_world_aabb(inst)
        region = ws.location_region(inst.location)
        if not region.contains_box(box, tol=CONTAINMENT_TOL):
            raise ScenarioError(
                f"instances[{idx}] ({inst.id}): not contained in location "
                f"{inst.location!r}")


def load_scenario(path) -> Workspace:
    with open(path) as f:
        try:
            config = json.load(f)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: invalid JSON ({exc})") from exc
    return build_workspace(config)
