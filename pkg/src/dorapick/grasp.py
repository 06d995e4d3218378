"""Gripper capability models, grasp database, selection and execution.

Grasps are generated analytically from the object mesh: suction plans
approach the largest planar face clusters head on; finger plans come from
antipodal face-cluster pairs whose separation fits between the gripper's
minimum pinch and maximum opening. Feasibility layers the capability
checks (mass, material, thickness) with a swept clearance check in the
live workspace; the same capability code backs the gripper-by-object
capability matrix.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .geom import Pose, look_at, normalize, quat_from_axis_angle, quat_mul
from .mesh import TriMesh, triangle_areas, triangle_normals
from .scene import (GripperVolume, Instance, ObjectModel, Workspace,
                    bin_exit_travel, min_separation, swept_collide,
                    table_exit_travel)

VACUUM_MAX_MASS = 0.3          # kg, suction lift limit
ROBOT_PAYLOAD = 1.5            # kg, arm payload ceiling for finger grippers
MAX_PRISMATIC_TRAVEL = 0.35    # m, prismatic joint extension limit
DOUBLE_PICK_DISTANCE = 0.010   # m, neighbors closer than this come along
M2_SLIP_FACTOR = 1.5           # slip band: thickness < factor * min pinch
NORMAL_CLUSTER_DEG = 10.0
SUPPORT_CLEARANCE = 0.002      # m, finger sweep kept this far off the support
DEFAULT_STANDOFF = 0.10        # m, staging distance behind contact


class GripperKind(Enum):
    VACUUM = "vacuum"
    PARALLEL_M2 = "m2"
    SOFT = "soft"


class GraspResult(Enum):
    SUCCESS = "Success"
    FAIL_TOO_HEAVY = "FailTooHeavy"
    FAIL_MATERIAL = "FailMaterial"
    FAIL_TOO_THIN = "FailTooThin"
    FAIL_TOO_WIDE = "FailTooWide"
    DOUBLE_PICK = "DoublePick"
    SLIP = "Slip"


@dataclass(frozen=True)
class GraspOutcome:
    result: GraspResult
    other_id: str | None = None

    @property
    def success(self) -> bool:
        return self.result is GraspResult.SUCCESS


class StalePlanError(RuntimeError):
    """The workspace changed since the plan was selected."""


class NudgeBlockedError(RuntimeError):
    """The nudge would push the instance out of its region or into contact."""


@dataclass(frozen=True)
class GripperModel:
    kind: GripperKind
    volume: GripperVolume
    max_mass: float
    max_opening: float = 0.0
    min_thickness: float = 0.0
    contact_button: bool = False     # vacuum: touch feedback
    grasp_feedback: bool = True      # M2 lacks any grasp sensor
    scoop: bool = False              # soft: fingernails slide under objects
    distance_sensor: bool = False
    compact_closed: bool = False

    @staticmethod
    def vacuum(**overrides) -> "GripperModel":
        cfg = dict(
            kind=GripperKind.VACUUM,
            volume=GripperVolume((0.03, 0.03, 0.15), (0.03, 0.03, 0.15)),
            max_mass=VACUUM_MAX_MASS,
            contact_button=True,
        )
        cfg.update(overrides)
        return GripperModel(**cfg)

    @staticmethod
    def parallel_m2(**overrides) -> "GripperModel":
        cfg = dict(
            kind=GripperKind.PARALLEL_M2,
            volume=GripperVolume((0.10, 0.09, 0.20), (0.17, 0.14, 0.20)),
            max_mass=ROBOT_PAYLOAD,
            max_opening=0.08,
            min_thickness=0.015,
            grasp_feedback=False,
        )
        cfg.update(overrides)
        return GripperModel(**cfg)

    @staticmethod
    def soft(**overrides) -> "GripperModel":
        cfg = dict(
            kind=GripperKind.SOFT,
            volume=GripperVolume((0.05, 0.06, 0.16), (0.06, 0.09, 0.18)),
            max_mass=ROBOT_PAYLOAD,
            max_opening=0.12,
            min_thickness=0.008,
            scoop=True,
            distance_sensor=True,
            compact_closed=True,
        )
        cfg.update(overrides)
        return GripperModel(**cfg)

    @staticmethod
    def named(name: str) -> "GripperModel":
        factory = {
            "vacuum": GripperModel.vacuum,
            "m2": GripperModel.parallel_m2,
            "soft": GripperModel.soft,
        }.get(name)
        if factory is None:
            raise ValueError(f"unknown gripper {name!r} (vacuum, m2, soft)")
        return factory()

    def sweep_mesh(self) -> TriMesh:
        return self.volume.mesh(open_state=True)


@dataclass(frozen=True)
class GraspPlan:
    approach: tuple[float, float, float]  # unit direction, object frame
    width: float                          # finger opening; 0 for vacuum
    score: float
    standoff: float = DEFAULT_STANDOFF

    def __post_init__(self):
        a = np.asarray(self.approach, dtype=np.float64)
        if abs(np.linalg.norm(a) - 1.0) > 1e-9:
            raise ValueError("approach must be unit length")
        object.__setattr__(self, "approach",
                           (float(a[0]), float(a[1]), float(a[2])))

    def approach_world(self, object_pose: Pose) -> np.ndarray:
        return object_pose.rotate(np.asarray(self.approach))


@dataclass(frozen=True)
class NoValidGrasp:
    """Why selection failed: a capability reason rules the object out for
    this gripper entirely; otherwise the plans were merely blocked in the
    current workspace and a nudge may free one."""
    capability: GraspResult | None = None
    blocked: bool = False


# ---------------------------------------------------------------------------
# Face clustering and plan generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FaceCluster:
    normal: np.ndarray
    area: float
    offset: float  # signed plane offset from the mesh frame origin


def face_clusters(mesh: TriMesh, tol_deg: float = NORMAL_CLUSTER_DEG) -> list[FaceCluster]:
    """Group triangles by normal direction (within tol) into planar faces."""
    corners = mesh.corners()
    normals = triangle_normals(corners)
    areas = triangle_areas(corners)
    centers = corners.mean(axis=1)
    cos_tol = math.cos(math.radians(tol_deg))
    groups: list[list[int]] = []
    reps: list[np.ndarray] = []
    for i in range(len(normals)):
        for g, rep in enumerate(reps):
            if float(normals[i] @ rep) >= cos_tol:
                groups[g].append(i)
                break
        else:
            groups.append([i])
            reps.append(normals[i])
    clusters = []
    for idx in groups:
        w = areas[idx]
        n = normalize((normals[idx] * w[:, None]).sum(axis=0))
        offset = float((np.einsum("ij,ij->i", centers[idx], normals[idx]) * w).sum()
                       / w.sum())
        clusters.append(FaceCluster(n, float(w.sum()), offset))
    clusters.sort(key=lambda c: (-c.area, tuple(np.round(c.normal, 9))))
    return clusters


def _perpendicular_approaches(axis: np.ndarray,
                              clusters: list[FaceCluster]) -> list[np.ndarray]:
    """Approach directions at right angles to the grasp axis.

    Prefers the inward normals of faces perpendicular to the axis (the
    gripper slides in over a real face); falls back to a constructed
    orthonormal pair for shapes with no such faces.
    """
    out = []
    for c in clusters:
        if abs(float(c.normal @ axis)) <= math.sin(math.radians(NORMAL_CLUSTER_DEG)):
            out.append(-c.normal)
    if not out:
        helper = np.array([0.0, 0.0, 1.0])
        if abs(float(axis @ helper)) > 0.9:
            helper = np.array([1.0, 0.0, 0.0])
        u = normalize(np.cross(axis, helper))
        v = np.cross(axis, u)
        out = [u, -u, v, -v]
    uniq = []
    for a in out:
        key = tuple(np.round(a, 6))
        if key not in [tuple(np.round(b, 6)) for b in uniq]:
            uniq.append(normalize(a))
    return uniq


def _plan_sort_key(p: GraspPlan):
    return (-p.score, p.approach, p.width)


def precompute_grasps(model: ObjectModel, gripper: GripperModel) -> list[GraspPlan]:
    """Analytic grasp candidates for one object and gripper kind.

    Vacuum: one head-on plan per face cluster, scored by face area.
    Fingers: antipodal cluster pairs gated by the pinch/opening range,
    scored half by how central the width sits in the opening range and
    half by contact patch area. No feasible candidate means an empty
    list, not an error.
    """
    clusters = face_clusters(model.mesh)
    plans: list[GraspPlan] = []
    if gripper.kind is GripperKind.VACUUM:
        max_area = max(c.area for c in clusters)
        for c in clusters:
            approach = -c.normal
            plans.append(GraspPlan(
                approach=tuple(approach), width=0.0,
                score=round(c.area / max_area, 9)))
        plans.sort(key=_plan_sort_key)
        return plans

    half_open = 0.5 * gripper.max_opening
    pairs = []
    for i, j in itertools.combinations(range(len(clusters)), 2):
        ci, cj = clusters[i], clusters[j]
        if float(ci.normal @ cj.normal) > -math.cos(math.radians(NORMAL_CLUSTER_DEG)):
            continue
        separation = ci.offset + cj.offset
        if separation < gripper.min_thickness or separation > gripper.max_opening:
            continue
        pairs.append((ci, cj, separation))
    if not pairs:
        return []
    max_patch = max(min(ci.area, cj.area) for ci, cj, _ in pairs)
    for ci, cj, separation in pairs:
        width_score = 1.0 - abs(separation - half_open) / half_open
        patch_score = min(ci.area, cj.area) / max_patch
        score = 0.5 * width_score + 0.5 * patch_score
        for approach in _perpendicular_approaches(ci.normal, clusters):
            plans.append(GraspPlan(
                approach=tuple(approach), width=float(separation),
                score=round(score, 9)))
    # Identical (approach, width) pairs can arise from symmetric faces.
    seen = set()
    unique = []
    for p in sorted(plans, key=_plan_sort_key):
        key = (p.approach, round(p.width, 9))
        if key not in seen:
            seen.add(key)
            unique.append(p)
    return unique


# ---------------------------------------------------------------------------
# Contact geometry
# ---------------------------------------------------------------------------

def surface_offset(model: ObjectModel, approach) -> float:
    """Distance from the mesh origin to the first surface point met along
    the approach (the support plane facing the gripper)."""
    a = np.asarray(approach, dtype=np.float64)
    return float(np.max(model.mesh.vertices @ (-a)))


def contact_pose(model: ObjectModel, object_pose: Pose, plan: GraspPlan,
                 gripper: GripperModel) -> Pose:
    """Tool pose at the end of the approach travel.

    +Z of the tool frame is the world approach direction and the fingertip
    plane touches the object's near surface. For lateral approaches the
    pose is lifted just enough to keep the sweep envelope off the support
    plane (the scoop motion: fingers skim the surface, never stab it).
    """
    a_w = normalize(plan.approach_world(object_pose))
    offset = surface_offset(model, np.asarray(plan.approach))
    tip = object_pose.t - offset * a_w
    pose = look_at(tip, tip + a_w)
    if abs(float(a_w[2])) < 0.7 and gripper.kind is not GripperKind.VACUUM:
        support_z = float(model.mesh.transformed(object_pose).aabb().lo[2])
        sweep_lo = float(gripper.sweep_mesh().transformed(pose).aabb().lo[2])
        lift = max(0.0, support_z + SUPPORT_CLEARANCE - sweep_lo)
        if lift > 0.0:
            pose = Pose(pose.q, pose.t + np.array([0.0, 0.0, lift]))
    return pose


def approach_sweep(contact: Pose, a_w: np.ndarray, standoff: float) -> list[Pose]:
    start = Pose(contact.q, contact.t - standoff * a_w)
    return [start, contact]


# ---------------------------------------------------------------------------
# Capability checks (shared by feasibility, execution and the matrix)
# ---------------------------------------------------------------------------

def capability_failure(gripper: GripperModel, model: ObjectModel) -> GraspResult | None:
    if gripper.kind is GripperKind.VACUUM:
        if model.mass > gripper.max_mass:
            return GraspResult.FAIL_TOO_HEAVY
        if not model.material.suction_compatible:
            return GraspResult.FAIL_MATERIAL
        return None
    if model.mass > gripper.max_mass:
        return GraspResult.FAIL_TOO_HEAVY
    if model.min_thickness < gripper.min_thickness:
        return GraspResult.FAIL_TOO_THIN
    if model.min_thickness > gripper.max_opening:
        return GraspResult.FAIL_TOO_WIDE
    return None


def matrix_feasible(gripper: GripperModel, model: ObjectModel) -> bool:
    """Metadata-level pickability, including detectability: transparent
    objects defeat the depth sensor before any grasp question arises."""
    if model.material.transparent:
        return False
    return capability_failure(gripper, model) is None


def capability_matrix(models: list[ObjectModel],
                      grippers: list[GripperModel]) -> list[tuple[str, list[int]]]:
    return [
        (m.id, [1 if matrix_feasible(g, m) else 0 for g in grippers])
        for m in models
    ]


# ---------------------------------------------------------------------------
# Feasibility, selection, execution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Feasibility:
    ok: bool
    reason: GraspResult | None = None   # capability failure, if any
    blocked: bool = False               # clearance or reach blocked
    detail: str = ""


def _exit_travel(ws: Workspace, inst: Instance, gripper: GripperModel,
                 contact: Pose, a_w: np.ndarray) -> float:
    mesh = gripper.sweep_mesh()
    if inst.location == "table":
        return table_exit_travel(ws, mesh, contact, -a_w)
    return bin_exit_travel(ws.bin(int(inst.location)), mesh, contact, -a_w)


def feasible(ws: Workspace, gripper: GripperModel, instance_id: str,
             plan: GraspPlan) -> Feasibility:
    """Capability, geometry, reach and clearance checks for one plan."""
    inst = ws.instance(instance_id)
    model = ws.model_of(inst)
    reason = capability_failure(gripper, model)
    if reason is not None:
        return Feasibility(False, reason=reason, detail=reason.value)

    a_w = normalize(plan.approach_world(inst.pose))
    contact = contact_pose(model, inst.pose, plan, gripper)
    exit_travel = _exit_travel(ws, inst, gripper, contact, a_w)
    travel = max(exit_travel, plan.standoff)
    if not math.isfinite(travel) or travel > MAX_PRISMATIC_TRAVEL:
        return Feasibility(False, blocked=True,
                           detail=f"travel {travel:.3f} m exceeds prismatic reach")

    sweep = approach_sweep(contact, a_w, plan.standoff)
    if swept_collide(gripper.sweep_mesh(), sweep, ws, ignore=(instance_id,)):
        return Feasibility(False, blocked=True, detail="approach corridor blocked")
    return Feasibility(True)


def select_grasp(ws: Workspace, gripper: GripperModel, instance_id: str,
                 plans: list[GraspPlan]) -> GraspPlan | NoValidGrasp:
    """Highest-score feasible plan (ties: lexicographically smallest
    approach). Returns NoValidGrasp describing why nothing passed."""
    inst = ws.instance(instance_id)
    model = ws.model_of(inst)
    if not plans:
        return NoValidGrasp(capability=capability_failure(gripper, model))
    capability: GraspResult | None = None
    blocked = False
    for plan in sorted(plans, key=_plan_sort_key):
        check = feasible(ws, gripper, instance_id, plan)
        if check.ok:
            return plan
        if check.reason is not None and capability is None:
            capability = check.reason
        blocked = blocked or check.blocked
    return NoValidGrasp(capability=capability, blocked=blocked)


def nudge(ws: Workspace, instance_id: str, direction, magnitude: float,
          yaw_deg: float = 5.0) -> Workspace:
    """Shove the instance: translate along ``direction`` plus a small
    deterministic yaw. Raises NudgeBlockedError if the result leaves the
    instance's region or contacts anything."""
    inst = ws.instance(instance_id)
    d = normalize(np.asarray(direction, dtype=np.float64))
    new_pose = Pose(
        quat_mul(quat_from_axis_angle((0, 0, 1), math.radians(yaw_deg)), inst.pose.q),
        inst.pose.t + magnitude * d,
    )
    moved = ws.with_instance_pose(instance_id, new_pose)
    new_inst = moved.instance(instance_id)
    region = moved.location_region(new_inst.location)
    if not region.contains_box(moved.instance_world_aabb(new_inst), tol=1e-3):
        raise NudgeBlockedError(f"{instance_id}: nudge leaves its region")
    mesh = moved.model_of(new_inst).mesh
    if swept_collide(mesh, [new_pose], moved, ignore=(instance_id,)):
        raise NudgeBlockedError(f"{instance_id}: nudge ends in contact")
    return moved


def attempt_grasp(ws: Workspace, gripper: GripperModel, instance_id: str,
                  plan: GraspPlan) -> tuple[GraspOutcome, Workspace]:
    """Execute a selected plan against the live workspace.

    Success removes the instance (the caller attaches it to the tool).
    Vacuum and soft grips drag an adjacent neighbor along (double pick);
    the M2 loses marginally thin objects to slip. A plan whose clearance
    has silently gone stale raises StalePlanError.
    """
    inst = ws.instance(instance_id)
    model = ws.model_of(inst)

    reason = capability_failure(gripper, model)
    if reason is not None:
        return GraspOutcome(reason), ws

    check = feasible(ws, gripper, instance_id, plan)
    if not check.ok:
        raise StalePlanError(f"{instance_id}: {check.detail}")

    if gripper.kind in (GripperKind.VACUUM, GripperKind.SOFT):
        adjacent = []
        for other in ws.instances:
            if other.id == instance_id:
                continue
            gap = min_separation(ws, instance_id, other.id)
            if gap < DOUBLE_PICK_DISTANCE:
                adjacent.append((gap, other.id))
        if adjacent:
            adjacent.sort()
            other_id = adjacent[0][1]
            out = ws.without_instance(instance_id).without_instance(other_id)
            return GraspOutcome(GraspResult.DOUBLE_PICK, other_id=other_id), out

    if (gripper.kind is GripperKind.PARALLEL_M2
            and model.min_thickness < M2_SLIP_FACTOR * gripper.min_thickness):
        return GraspOutcome(GraspResult.SLIP), ws

    return GraspOutcome(GraspResult.SUCCESS), ws.without_instance(instance_id)


# ---------------------------------------------------------------------------
# Grasp database
# ---------------------------------------------------------------------------

@dataclass
class GraspDatabase:
    plans: dict[str, dict[str, list[GraspPlan]]] = field(default_factory=dict)

    @staticmethod
    def build(models: list[ObjectModel],
              grippers: list[GripperModel]) -> "GraspDatabase":
        db = GraspDatabase()
        for m in models:
            db.plans[m.id] = {
                g.kind.value: precompute_grasps(m, g) for g in grippers
            }
        return db

    def lookup(self, object_id: str, kind: GripperKind) -> list[GraspPlan]:
        return self.plans.get(object_id, {}).get(kind.value, [])

    def save(self, path) -> None:
        doc = {
            oid: {
                kind: [
                    {"approach": list(p.approach), "width": p.width,
                     "score": p.score, "standoff": p.standoff}
                    for p in plans
                ]
                for kind, plans in kinds.items()
            }
            for oid, kinds in sorted(self.plans.items())
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")

    @staticmethod
    def load(path) -> "GraspDatabase":
        doc = json.loads(Path(path).read_text())
        db = GraspDatabase()
        for oid, kinds in doc.items():
            db.plans[oid] = {
                kind: [
                    GraspPlan(tuple(e["approach"]), float(e["width"]),
                              float(e["score"]), float(e["standoff"]))
                    for e in entries
                ]
                for kind, entries in kinds.items()
            }
        return db
