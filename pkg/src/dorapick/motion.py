"""End-effector motion: two-phase planning around a prismatic extension.

Paths live in SE(3) end-effector space. The planner tries the straight
segment first and falls back to a seeded sampling tree with shortcut
smoothing; reachability is a sphere around the robot base. The prismatic
extension and its inverse (retreat) are straight-line primitives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geom import Pose, normalize, quat_angle, quat_conj, quat_from_axis_angle, quat_mul
from .grasp import (MAX_PRISMATIC_TRAVEL, GraspPlan, GripperModel,
                    contact_pose)
from .mesh import TriMesh, merge_meshes
from .scene import (Location, ObjectModel, Workspace, bin_exit_travel,
                    densify_path, interpolate_pose, swept_collide,
                    table_exit_travel)

EXTEND_STEP = 0.005           # m between prismatic waypoints
ROTATION_WEIGHT = 0.1         # m per radian in the SE(3) distance metric
TABLE_RETREAT_HEIGHT = 0.10   # m straight up after a table grasp
RETREAT_MARGIN = 0.02         # m beyond the computed exit distance


class PathPhase(Enum):
    TO_PRE_GRASP = "ToPreGrasp"
    EXTEND = "Extend"
    RETREAT = "Retreat"
    TO_PLACEMENT = "ToPlacement"


@dataclass(frozen=True)
class EePath:
    waypoints: tuple[Pose, ...]
    phase: PathPhase

    def length(self) -> float:
        return sum(
            float(np.linalg.norm(b.t - a.t))
            for a, b in zip(self.waypoints, self.waypoints[1:])
        )


@dataclass(frozen=True)
class PlannerParams:
    max_samples: int = 20000
    goal_bias: float = 0.1
    step: float = 0.03
    seed: int = 0
    shortcut_passes: int = 50

    def __post_init__(self):
        if self.max_samples <= 0 or self.step <= 0 or self.shortcut_passes < 0:
            raise ValueError("planner parameters must be positive")
        if not (0.0 <= self.goal_bias < 1.0):
            raise ValueError("goal bias must lie in [0, 1)")


class UnreachableDepthError(RuntimeError):
    """The pick would need more prismatic travel than the joint has."""


class NoPathError(RuntimeError):
    """The planner exhausted its sample budget without connecting."""


class StuckInBinError(RuntimeError):
    """Neither retreat strategy extracts the grasped object."""


@dataclass(frozen=True)
class PreGrasp:
    pose: Pose
    contact: Pose
    approach: np.ndarray  # world-frame unit approach direction
    travel: float


def pre_grasp_pose(ws: Workspace, location: Location, plan: GraspPlan,
                   gripper: GripperModel, model: ObjectModel,
                   object_pose: Pose) -> PreGrasp:
    """Staging pose fully outside the bin (or clear of the table slab).

    The pose sits on the approach line far enough back that the whole
    open gripper volume has left the bin cavity, never closer than the
    plan's standoff. Travel beyond the prismatic limit raises
    UnreachableDepthError.
    """
    contact = contact_pose(model, object_pose, plan, gripper)
    a_w = normalize(plan.approach_world(object_pose))
    mesh = gripper.sweep_mesh()
    if location == "table":
        exit_travel = table_exit_travel(ws, mesh, contact, -a_w)
    else:
        exit_travel = bin_exit_travel(ws.bin(int(location)), mesh, contact, -a_w)
    travel = max(exit_travel, plan.standoff)
    if not math.isfinite(travel) or travel > MAX_PRISMATIC_TRAVEL:
        raise UnreachableDepthError(
            f"required travel {travel:.3f} m exceeds {MAX_PRISMATIC_TRAVEL} m")
    pose = Pose(contact.q, contact.t - travel * a_w)
    return PreGrasp(pose=pose, contact=contact, approach=a_w, travel=travel)


# ---------------------------------------------------------------------------
# Sampling-based planning
# ---------------------------------------------------------------------------

def _se3_distance(a: Pose, b: Pose) -> float:
    ang = quat_angle(quat_mul(quat_conj(a.q), b.q))
    return float(np.linalg.norm(a.t - b.t)) + ROTATION_WEIGHT * ang


def _random_pose(rng: np.random.Generator, center: np.ndarray, radius: float) -> Pose:
    # Uniform in the reach ball; uniform random orientation (Shoemake).
    u = rng.random(3)
    r = radius * u[0] ** (1.0 / 3.0)
    costh = 2.0 * u[1] - 1.0
    sinth = math.sqrt(max(0.0, 1.0 - costh * costh))
    phi = 2.0 * math.pi * u[2]
    pos = center + r * np.array([sinth * math.cos(phi), sinth * math.sin(phi), costh])
    s = rng.random(3)
    q = np.array([
        math.sqrt(1.0 - s[0]) * math.sin(2.0 * math.pi * s[1]),
        math.sqrt(1.0 - s[0]) * math.cos(2.0 * math.pi * s[1]),
        math.sqrt(s[0]) * math.sin(2.0 * math.pi * s[2]),
        math.sqrt(s[0]) * math.cos(2.0 * math.pi * s[2]),
    ])
    return Pose(q, pos)


def _segment_free(ws: Workspace, moving: TriMesh, a: Pose, b: Pose,
                  ignore: tuple[str, ...]) -> bool:
    return not swept_collide(moving, [a, b], ws, ignore=ignore)


def plan_path(ws: Workspace, start: Pose, goal: Pose, moving: TriMesh,
              params: PlannerParams, ignore: tuple[str, ...] = (),
              phase: PathPhase = PathPhase.TO_PRE_GRASP) -> EePath:
    """Collision-free waypoint path from start to goal.

    Straight-line first; otherwise a goal-biased random tree in SE(3)
    followed by shortcut smoothing. Deterministic for a fixed seed.
    Raises NoPathError when the goal is infeasible or the budget runs out.
    """
    for name, pose in (("start", start), ("goal", goal)):
        if not ws.within_reach(pose.t):
            raise NoPathError(f"{name} pose outside reach sphere")
        if swept_collide(moving, [pose], ws, ignore=ignore):
            raise NoPathError(f"{name} pose in collision")

    if _segment_free(ws, moving, start, goal, ignore):
        return EePath((start, goal), phase)

    rng = np.random.default_rng(params.seed)
    nodes = [start]
    parents = [-1]
    for _ in range(params.max_samples):
        target = goal if rng.random() < params.goal_bias else _random_pose(
            rng, ws.robot_base.t, ws.reach_radius)
        dists = [_se3_distance(n, target) for n in nodes]
        ni = int(np.argmin(dists))
        near = nodes[ni]
        d = dists[ni]
        if d < 1e-9:
            continue
        u = min(1.0, params.step / d)
        new = interpolate_pose(near, target, u)
        if not ws.within_reach(new.t):
            continue
        if not _segment_free(ws, moving, near, new, ignore):
            continue
        nodes.append(new)
        parents.append(ni)
        if _se3_distance(new, goal) <= params.step and _segment_free(
                ws, moving, new, goal, ignore):
            path = [goal, new]
            k = ni
            while k >= 0:
                path.append(nodes[k])
                k = parents[k]
            path.reverse()
            path = _shortcut(ws, moving, path, ignore, params, rng)
            return EePath(tuple(path), phase)
    raise NoPathError(f"no path after {params.max_samples} samples")


def _shortcut(ws: Workspace, moving: TriMesh, path: list[Pose],
              ignore: tuple[str, ...], params: PlannerParams,
              rng: np.random.Generator) -> list[Pose]:
    for _ in range(params.shortcut_passes):
        if len(path) <= 2:
            break
        i = int(rng.integers(0, len(path) - 2))
        j = int(rng.integers(i + 2, len(path)))
        if _segment_free(ws, moving, path[i], path[j], ignore):
            path = path[:i + 1] + path[j:]
    return path


# ---------------------------------------------------------------------------
# Prismatic extension and retreat
# ---------------------------------------------------------------------------

def extend_prismatic(pre: Pose, approach, travel: float) -> EePath:
    """Straight fingertip advance along the approach, orientation fixed."""
    if not (0.0 < travel <= MAX_PRISMATIC_TRAVEL + 1e-12):
        raise ValueError(
            f"travel must lie in (0, {MAX_PRISMATIC_TRAVEL}], got {travel}")
    a = normalize(np.asarray(approach, dtype=np.float64))
    steps = max(1, math.ceil(travel / EXTEND_STEP - 1e-9))
    waypoints = [Pose(pre.q, pre.t + (travel * k / steps) * a)
                 for k in range(steps + 1)]
    return EePath(tuple(waypoints), PathPhase.EXTEND)


def retreat(ws: Workspace, grasp_pose: Pose, plan: GraspPlan,
            grasped: ObjectModel, attachment: Pose, source: Location,
            gripper: GripperModel, object_pose: Pose) -> EePath:
    """Pull the grasped object out of its bin (or lift it off the table).

    Primary strategy reverses the approach; if the combined tool-plus-
    object envelope cannot exit, retries with the end-effector rotated 90
    degrees about the approach axis. Both failing raises StuckInBinError.
    The table case is a plain 10 cm lift.
    """
    a_w = normalize(plan.approach_world(object_pose))
    moving = merge_meshes([
        gripper.sweep_mesh(),
        grasped.mesh.transformed(attachment),
    ])

    if source == "table":
        up = np.array([0.0, 0.0, TABLE_RETREAT_HEIGHT])
        path = [grasp_pose, Pose(grasp_pose.q, grasp_pose.t + up)]
        if swept_collide(moving, path, ws):
            raise StuckInBinError("table lift blocked")
        return EePath(tuple(path), PathPhase.RETREAT)

    b = ws.bin(int(source))

    def straight_out(start: Pose) -> list[Pose] | None:
        exit_travel = bin_exit_travel(b, moving, start, -a_w)
        if not math.isfinite(exit_travel):
            return None
        total = exit_travel + RETREAT_MARGIN
        path = [start, Pose(start.q, start.t - total * a_w)]
        if swept_collide(moving, path, ws):
            return None
        return path

    path = straight_out(grasp_pose)
    if path is not None:
        return EePath(tuple(path), PathPhase.RETREAT)

    # Rotate the grasped envelope a quarter turn about the approach axis,
    # then reverse out. The in-place rotation is part of the checked path.
    spin = quat_from_axis_angle(a_w, math.pi / 2.0)
    rotated = Pose(quat_mul(spin, grasp_pose.q), grasp_pose.t)
    if not swept_collide(moving, [grasp_pose, rotated], ws):
        path = straight_out(rotated)
        if path is not None:
            return EePath((grasp_pose,) + tuple(path), PathPhase.RETREAT)
    raise StuckInBinError("object cannot exit the bin in either orientation")


def verify_path(ws: Workspace, moving: TriMesh, path: EePath,
                ignore: tuple[str, ...] = (), factor: int = 10) -> bool:
    """Replay a path against a ``factor`` times denser sweep (oracle)."""
    return not swept_collide(moving, list(path.waypoints), ws,
                             ignore=ignore, factor=factor)
