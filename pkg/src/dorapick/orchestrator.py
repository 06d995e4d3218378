"""Episode state machine: observe, detect, grasp, move, place, report.

Each work item runs the same loop the real system uses: render from up
to three observation poses, detect the target, select the best feasible
grasp (nudging the object free when every approach is blocked), plan the
outside-bin path, extend, grasp, retreat and place. Failures never abort
the episode; they become typed per-item results.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from . import grasp as gr
from . import motion as mo
from .autoscan import TemplateLibrary
from .geom import Aabb, Pose, compose, invert, normalize
from .perception import (Detection, DetectionFailure, DetectionParams, detect)
from .scene import (Location, Workspace, Instance, pose_from_list,
                    pose_to_list)
from .sensor import CameraIntrinsics, NoiseModel, apply_noise, render

EventSink = Callable[[dict], None] | None

OBSERVATION_STANDOFF = 0.4
OBSERVATION_LATERAL = 0.06
OBSERVATION_RAISE = 0.03
TABLE_VIEW_ELEVATION = math.radians(50.0)
BIN_WALL_CLEARANCE = 0.008   # shaved off the cavity when cropping, keeps wall points out
TABLE_CROP_LIFT = 0.003      # crop starts this far above the table top
PLACE_HOVER = 0.08
REPORT_SCHEMA_VERSION = 1


class Outcome(Enum):
    PLACED = "Placed"
    SKIPPED_UNDETECTED = "SkippedUndetected"
    NO_VALID_GRASP_AFTER_NUDGES = "NoValidGraspAfterNudges"
    PICK_FAILED = "PickFailed"
    STUCK_IN_BIN = "StuckInBin"
    PLANNING_FAILED = "PlanningFailed"


@dataclass(frozen=True)
class WorkItem:
    object_id: str
    source: Location
    destination: str | Pose  # "container" or an explicit resting pose

    @staticmethod
    def from_spec(entry: dict, known_objects: set[str], path: str) -> "WorkItem":
        try:
            obj = entry["object"]
            source = entry["from"]
            dest = entry["to"]
        except KeyError as exc:
            raise ValueError(f"{path}: missing key {exc}") from exc
        if obj not in known_objects:
            raise ValueError(f"{path}: unknown object {obj!r}")
        if not (source == "table" or isinstance(source, int)):
            raise ValueError(f"{path}: source must be a bin id or \"table\"")
        if dest != "container":
            dest = pose_from_list(dest, f"{path}.to")
        return WorkItem(obj, source, dest)


@dataclass(frozen=True)
class WorkOrder:
    items: tuple[WorkItem, ...]

    def __post_init__(self):
        if not self.items:
            raise ValueError("work order must contain at least one item")

    @staticmethod
    def from_json(doc: list, known_objects: set[str]) -> "WorkOrder":
        items = tuple(
            WorkItem.from_spec(e, known_objects, f"order[{i}]")
            for i, e in enumerate(doc)
        )
        return WorkOrder(items)


@dataclass
class ItemResult:
    object_id: str
    outcome: Outcome
    grasp_outcome: gr.GraspOutcome | None = None
    detail: str = ""
    observations: int = 0
    nudges: int = 0
    detection: dict | None = None
    plan: dict | None = None
    grasp_pose: Pose | None = None
    attachment: Pose | None = None
    paths: dict[str, mo.EePath] = field(default_factory=dict)
    elapsed_s: float = 0.0

    def to_dict(self) -> dict:
        doc = {
            "object": self.object_id,
            "outcome": self.outcome.value,
            "detail": self.detail,
            "attempts": {"observations": self.observations, "nudges": self.nudges},
            "timings": {"elapsed_s": round(self.elapsed_s, 6)},
        }
        if self.grasp_outcome is not None:
            doc["grasp"] = {
                "result": self.grasp_outcome.result.value,
                "other": self.grasp_outcome.other_id,
            }
        if self.detection is not None:
            doc["detection"] = self.detection
        if self.plan is not None:
            doc["plan"] = self.plan
        if self.paths:
            doc["paths"] = {
                name: [pose_to_list(p) for p in path.waypoints]
                for name, path in self.paths.items()
            }
        return doc


@dataclass
class EpisodeReport:
    results: list[ItemResult]
    scenario_digest: str
    seed: int
    gripper: str
    config: dict
    final_workspace: Workspace

    def counts(self) -> dict[str, int]:
        out = {o.value: 0 for o in Outcome}
        for r in self.results:
            out[r.outcome.value] += 1
        return out

    def to_dict(self, timestamp: str | None = None) -> dict:
        doc = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "scenario_digest": self.scenario_digest,
            "seed": self.seed,
            "gripper": self.gripper,
            "config": self.config,
            "counts": self.counts(),
            "items": [r.to_dict() for r in self.results],
        }
        if timestamp is not None:
            doc["generated_at"] = timestamp
        return doc


@dataclass
class EpisodeConfig:
    detection: DetectionParams = field(default_factory=DetectionParams)
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    noise_sigma: float = 0.002
    noise_dropout: float = 0.02
    planner: mo.PlannerParams = field(default_factory=mo.PlannerParams)
    seed: int = 0
    nudge_magnitude: float = 0.02
    max_observations: int = 3
    max_nudges: int = 3

    @staticmethod
    def from_scenario(config: dict, seed: int = 0) -> "EpisodeConfig":
        detection = DetectionParams.from_config(config.get("perception"))
        sensor_cfg = config.get("sensor", {})
        rng_lo, rng_hi = sensor_cfg.get("range", (0.2, 1.2))
        intr = CameraIntrinsics(
            width=int(sensor_cfg.get("width", 640)),
            height=int(sensor_cfg.get("height", 480)),
            vfov_deg=float(sensor_cfg.get("vfov_deg", 46.0)),
            range_min=float(rng_lo),
            range_max=float(rng_hi),
        )
        noise_cfg = sensor_cfg.get("noise", {})
        planner_cfg = dict(config.get("planner", {}))
        planner_cfg.setdefault("seed", seed)
        return EpisodeConfig(
            detection=detection,
            intrinsics=intr,
            noise_sigma=float(noise_cfg.get("sigma", 0.002)),
            noise_dropout=float(noise_cfg.get("dropout", 0.02)),
            planner=mo.PlannerParams(**planner_cfg),
            seed=seed,
            nudge_magnitude=float(config.get("nudge_magnitude", 0.02)),
        )

    def to_dict(self) -> dict:
        return {
            "detection": {
                f: getattr(self.detection, f)
                for f in DetectionParams.__dataclass_fields__
            },
            "sensor": {
                "width": self.intrinsics.width,
                "height": self.intrinsics.height,
                "vfov_deg": self.intrinsics.vfov_deg,
                "range": [self.intrinsics.range_min, self.intrinsics.range_max],
                "noise": {"sigma": self.noise_sigma, "dropout": self.noise_dropout},
            },
            "planner": {
                f: getattr(self.planner, f)
                for f in mo.PlannerParams.__dataclass_fields__
            },
            "nudge_magnitude": self.nudge_magnitude,
            "max_observations": self.max_observations,
            "max_nudges": self.max_nudges,
        }


# ---------------------------------------------------------------------------
# Observation geometry
# ---------------------------------------------------------------------------

def observation_poses(ws: Workspace, location: Location) -> list[Pose]:
    """Center view of the bin opening (or table region) plus two lateral
    retries, all sharing the same look-at point."""
    from .geom import look_at

    if location == "table":
        region = ws.table_region()
        target = np.array([region.center[0], region.center[1], ws.table.hi[2]])
        horiz = ws.robot_base.t[:2] - target[:2]
        h = normalize(np.array([horiz[0], horiz[1], 0.0]))
        back = (math.cos(TABLE_VIEW_ELEVATION) * h
                + math.sin(TABLE_VIEW_ELEVATION) * np.array([0.0, 0.0, 1.0]))
        center = target + OBSERVATION_STANDOFF * back
        lateral = np.cross(h, np.array([0.0, 0.0, 1.0]))
    else:
        b = ws.bin(int(location))
        out = b.pose.rotate(np.array([0.0, 0.0, 1.0]))
        opening_center = b.pose.t
        depth = b.inner_dims[2]
        target = b.pose.apply(np.array([0.0, 0.0, -0.5 * depth]))
        center = (opening_center + OBSERVATION_STANDOFF * out
                  + np.array([0.0, 0.0, OBSERVATION_RAISE]))
        lateral = b.pose.rotate(np.array([1.0, 0.0, 0.0]))

    offsets = [0.0, -OBSERVATION_LATERAL, OBSERVATION_LATERAL]
    return [look_at(center + off * lateral, target) for off in offsets]


def detect_region(ws: Workspace, location: Location) -> Aabb:
    """Crop volume for detection: the cavity (or table top) shaved inward
    so the static surfaces themselves contribute no points."""
    if location == "table":
        return Aabb(
            (ws.table.lo[0] + 0.005, ws.table.lo[1] + 0.005,
             ws.table.hi[2] + TABLE_CROP_LIFT),
            (ws.table.hi[0] - 0.005, ws.table.hi[1] - 0.005,
             ws.table.hi[2] + 0.55),
        )
    b = ws.bin(int(location))
    interior = b.interior()
    c = BIN_WALL_CLEARANCE
    lo = interior.lo + np.array([c, c, c])
    hi = interior.hi - np.array([c, c, 0.001])
    corners = np.array([
        [x, y, z]
        for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])
    ])
    return Aabb.of_points(b.pose.apply(corners))


# ---------------------------------------------------------------------------
# Item processing
# ---------------------------------------------------------------------------

def _noise_seed(cfg: EpisodeConfig, item_index: int, attempt: int) -> int:
    return cfg.seed * 1_000_003 + item_index * 1_009 + attempt


def _emit(sink: EventSink, **record) -> None:
    if sink is not None:
        record.setdefault("timestamp", time.time())
        sink(record)


def _observe(ws: Workspace, item: WorkItem, templates, region, cfg: EpisodeConfig,
             item_index: int, attempt_base: int, poses: list[Pose],
             sink: EventSink):
    """Render and detect from each pose in turn; first hit wins."""
    last_failure = None
    for k, pose in enumerate(poses):
        cloud = render(ws, pose, cfg.intrinsics)
        noise = NoiseModel(cfg.noise_sigma, cfg.noise_dropout,
                           seed=_noise_seed(cfg, item_index, attempt_base + k))
        cloud = apply_noise(cloud, noise)
        result = detect(cloud, item.object_id, templates, region, cfg.detection,
                        log=(lambda rec: _emit(sink, event="detect", item=item.object_id,
                                               **rec)) if sink else None)
        if isinstance(result, Detection):
            return result, pose, k + 1
        last_failure = result
    return last_failure, None, len(poses)


def _resolve_instance(ws: Workspace, item: WorkItem,
                      detection: Detection) -> Instance | None:
    candidates = [i for i in ws.instances if i.object_id == item.object_id]
    if not candidates:
        return None
    return min(candidates,
               key=lambda i: float(np.linalg.norm(i.pose.t - detection.pose.t)))


def _nudge_direction(ws: Workspace, inst: Instance,
                     plans: list[gr.GraspPlan]) -> np.ndarray:
    """Direction of the freeing shove: the blocked approach projected into
    the bin opening plane (or the horizontal), else toward open space."""
    preferred = None
    if plans:
        a_w = plans[0].approach_world(inst.pose)
        if inst.location == "table":
            preferred = np.array([a_w[0], a_w[1], 0.0])
        else:
            b = ws.bin(int(inst.location))
            x_bin = b.pose.rotate(np.array([1.0, 0.0, 0.0]))
            preferred = float(a_w @ x_bin) * x_bin
    if preferred is not None and float(np.linalg.norm(preferred)) > 1e-6:
        return normalize(preferred)
    if inst.location == "table":
        center = ws.table_region().center
        v = np.array([center[0] - inst.pose.t[0], center[1] - inst.pose.t[1], 0.0])
    else:
        b = ws.bin(int(inst.location))
        center = _interior_center(b)
        x_bin = b.pose.rotate(np.array([1.0, 0.0, 0.0]))
        v = float((center - inst.pose.t) @ x_bin) * x_bin
    if float(np.linalg.norm(v)) < 1e-6:
        v = b.pose.rotate(np.array([1.0, 0.0, 0.0])) if inst.location != "table" \
            else np.array([1.0, 0.0, 0.0])
    return normalize(v)


def _interior_center(b) -> np.ndarray:
    return b.pose.apply(b.interior().center)


def _placement_slot(ws: Workspace, dest_index: int) -> np.ndarray:
    """Deterministic drop positions cycling over a grid on the container."""
    ext = ws.container.extents
    cx, cy = ws.container.center[0], ws.container.center[1]
    dx, dy = ext[0] / 4.0, ext[1] / 4.0
    offsets = [(-dx, -dy), (dx, -dy), (-dx, 0.0), (dx, 0.0), (-dx, dy), (dx, dy)]
    ox, oy = offsets[dest_index % len(offsets)]
    return np.array([cx + ox, cy + oy, ws.container.hi[2]])


def _place_instances(ws: Workspace, placed: list[Instance]) -> Workspace:
    for inst in placed:
        n = sum(1 for i in ws.instances if i.location == "container")
        slot = _placement_slot(ws, n)
        model = ws.objects[inst.object_id]
        pose = Pose(inst.pose.q, np.array([
            slot[0], slot[1], slot[2] + 0.5 * float(model.extents[2])]))
        ws = ws.with_added_instance(Instance(inst.id, inst.object_id, pose,
                                             "container"))
    return ws


def process_item(ws: Workspace, item: WorkItem, gripper: gr.GripperModel,
                 library: TemplateLibrary, db: gr.GraspDatabase,
                 cfg: EpisodeConfig, item_index: int = 0,
                 sink: EventSink = None) -> tuple[ItemResult, Workspace]:
    """Run the full pick-and-place state machine for one work item.

    Returns the item result plus the possibly-updated workspace. Skipped
    and planning failures leave the workspace untouched apart from any
    nudges, which are themselves logged.
    """
    t0 = time.perf_counter()
    result = ItemResult(item.object_id, Outcome.SKIPPED_UNDETECTED)

    def done(outcome: Outcome, ws_out: Workspace, **kw) -> tuple[ItemResult, Workspace]:
        result.outcome = outcome
        for key, value in kw.items():
            setattr(result, key, value)
        result.elapsed_s = time.perf_counter() - t0
        _emit(sink, event="item_done", item=item.object_id,
              outcome=outcome.value, detail=result.detail)
        return result, ws_out

    templates = library.for_object(item.object_id)
    region = detect_region(ws, item.source)
    obs_poses = observation_poses(ws, item.source)

    _emit(sink, event="observe", item=item.object_id, location=str(item.source))
    found, obs_pose, used = _observe(ws, item, templates, region, cfg,
                                     item_index, 0, obs_poses, sink)
    result.observations = used
    if not isinstance(found, Detection):
        result.detail = f"{found.reason.value}: {found.detail}" if found else "no data"
        return done(Outcome.SKIPPED_UNDETECTED, ws)

    detection = found
    instance = _resolve_instance(ws, item, detection)
    if instance is None:
        result.detail = "detection matched no live instance"
        return done(Outcome.SKIPPED_UNDETECTED, ws)

    plans = db.lookup(item.object_id, gripper.kind)
    ws_cur = ws
    plan: gr.GraspPlan | None = None
    while True:
        sel = gr.select_grasp(ws_cur, gripper, instance.id, plans)
        if isinstance(sel, gr.GraspPlan):
            plan = sel
            break
        if sel.capability is not None:
            # Mass, material or thickness rules the gripper out entirely;
            # no amount of nudging changes that.
            result.detail = sel.capability.value
            return done(Outcome.PICK_FAILED, ws_cur,
                        grasp_outcome=gr.GraspOutcome(sel.capability))
        if result.nudges >= cfg.max_nudges:
            result.detail = "no valid approach after nudges"
            return done(Outcome.NO_VALID_GRASP_AFTER_NUDGES, ws_cur)
        direction = _nudge_direction(ws_cur, instance, plans)
        try:
            ws_cur = gr.nudge(ws_cur, instance.id, direction, cfg.nudge_magnitude)
        except gr.NudgeBlockedError as exc:
            result.detail = str(exc)
            return done(Outcome.NO_VALID_GRASP_AFTER_NUDGES, ws_cur)
        result.nudges += 1
        _emit(sink, event="nudge", item=item.object_id, count=result.nudges,
              direction=[float(x) for x in direction])
        # The object moved; look again before planning the approach.
        found, obs_pose2, used = _observe(
            ws_cur, item, templates, region, cfg, item_index,
            10 * result.nudges, [obs_pose] + [p for p in obs_poses if p is not obs_pose],
            sink)
        result.observations += used
        if not isinstance(found, Detection):
            result.detail = "lost after nudge"
            return done(Outcome.SKIPPED_UNDETECTED, ws_cur)
        detection = found
        obs_pose = obs_pose2
        instance = _resolve_instance(ws_cur, item, detection) or instance

    result.detection = {
        "template": detection.template_id,
        "score": round(detection.score, 6),
        "icp_rmse": round(detection.icp_rmse, 9),
    }
    result.plan = {
        "approach": list(plan.approach),
        "width": plan.width,
        "score": plan.score,
        "standoff": plan.standoff,
    }

    model = ws_cur.objects[item.object_id]
    try:
        pre = mo.pre_grasp_pose(ws_cur, item.source, plan, gripper, model,
                                detection.pose)
    except mo.UnreachableDepthError as exc:
        result.detail = str(exc)
        return done(Outcome.PLANNING_FAILED, ws_cur)

    try:
        approach_path = mo.plan_path(ws_cur, obs_pose, pre.pose,
                                     gripper.sweep_mesh(), cfg.planner)
    except mo.NoPathError as exc:
        result.detail = f"to-pre-grasp: {exc}"
        return done(Outcome.PLANNING_FAILED, ws_cur)
    result.paths["to_pre_grasp"] = approach_path

    extension = mo.extend_prismatic(pre.pose, pre.approach, pre.travel)
    from .scene import swept_collide
    if swept_collide(gripper.sweep_mesh(), list(extension.waypoints), ws_cur,
                     ignore=(instance.id,)):
        result.detail = "extension corridor blocked"
        return done(Outcome.PLANNING_FAILED, ws_cur)
    result.paths["extend"] = extension

    outcome, ws_after = gr.attempt_grasp(ws_cur, gripper, instance.id, plan)
    _emit(sink, event="grasp", item=item.object_id, result=outcome.result.value)
    if outcome.result not in (gr.GraspResult.SUCCESS, gr.GraspResult.DOUBLE_PICK):
        result.detail = outcome.result.value
        return done(Outcome.PICK_FAILED, ws_after, grasp_outcome=outcome)

    grasp_ee = pre.contact
    attachment = compose(invert(grasp_ee), instance.pose)
    result.grasp_pose = grasp_ee
    result.attachment = attachment

    try:
        retreat_path = mo.retreat(ws_after, grasp_ee, plan, model, attachment,
                                  item.source, gripper, instance.pose)
    except mo.StuckInBinError as exc:
        # The grasp is abandoned and the object stays where it was.
        result.detail = str(exc)
        return done(Outcome.STUCK_IN_BIN, ws_cur, grasp_outcome=outcome)
    result.paths["retreat"] = retreat_path

    carried = [instance]
    if outcome.result is gr.GraspResult.DOUBLE_PICK:
        carried.append(ws_cur.instance(outcome.other_id))

    if item.destination == "container":
        n_existing = sum(1 for i in ws_after.instances if i.location == "container")
        slot = _placement_slot(ws_after, n_existing)
        hover_z = slot[2] + float(model.extents[2]) + PLACE_HOVER
        place_target = np.array([slot[0], slot[1], hover_z])
    else:
        dest: Pose = item.destination
        place_target = dest.t + np.array([0.0, 0.0, PLACE_HOVER])
    post = retreat_path.waypoints[-1]
    place_goal = Pose(post.q, place_target)

    moving = _carried_mesh(ws_cur, gripper, carried, grasp_ee)
    try:
        place_path = mo.plan_path(ws_after, post, place_goal, moving,
                                  cfg.planner, phase=mo.PathPhase.TO_PLACEMENT)
    except mo.NoPathError as exc:
        result.detail = f"to-placement: {exc}"
        return done(Outcome.PLANNING_FAILED, ws_cur, grasp_outcome=outcome)
    result.paths["to_placement"] = place_path

    if item.destination == "container":
        ws_final = _place_instances(ws_after, carried)
    else:
        ws_final = ws_after
        for k, inst in enumerate(carried):
            pose = item.destination if k == 0 else Pose(
                inst.pose.q, item.destination.t + np.array([0.0, 0.05 * k, 0.0]))
            ws_final = ws_final.with_added_instance(
                Instance(inst.id, inst.object_id, pose, "table"))
    _emit(sink, event="place", item=item.object_id,
          destination=str(item.destination))

    if outcome.result is gr.GraspResult.DOUBLE_PICK:
        result.detail = f"double pick with {outcome.other_id}"
        return done(Outcome.PICK_FAILED, ws_final, grasp_outcome=outcome)
    return done(Outcome.PLACED, ws_final, grasp_outcome=outcome)


def _carried_mesh(ws: Workspace, gripper: gr.GripperModel,
                  carried: list[Instance], grasp_ee: Pose):
    from .mesh import merge_meshes
    parts = [gripper.sweep_mesh()]
    for inst in carried:
        attach = compose(invert(grasp_ee), inst.pose)
        parts.append(ws.objects[inst.object_id].mesh.transformed(attach))
    return merge_meshes(parts)


def run_order(ws: Workspace, order: WorkOrder, gripper: gr.GripperModel,
              library: TemplateLibrary, db: gr.GraspDatabase,
              cfg: EpisodeConfig, sink: EventSink = None) -> EpisodeReport:
    """Process every item in sequence, threading the workspace through.

    Item failures are recorded, never raised; the report is complete and
    reproducible for a fixed seed.
    """
    digest = ws.digest()
    results = []
    current = ws
    for idx, item in enumerate(order.items):
        _emit(sink, event="item_start", item=item.object_id, index=idx)
        result, current = process_item(current, item, gripper, library, db,
                                       cfg, item_index=idx, sink=sink)
        results.append(result)
    return EpisodeReport(
        results=results,
        scenario_digest=digest,
        seed=cfg.seed,
        gripper=gripper.kind.value,
        config=cfg.to_dict(),
        final_workspace=current,
    )
