"""Desk-scale autonomous pick-and-place simulation.

Synthetic RGBD sensing, snapshot-template 6D pose estimation with ICP
refinement, three gripper capability models with analytic grasp planning,
end-effector motion planning around a prismatic extension, and the
episode orchestration that ties them together.
"""

__version__ = "0.1.0"

from .geom import (Aabb, PointCloud, Pose, SpatialIndex, best_rigid_transform,
                   compose, estimate_normals, invert, transform_cloud)
from .mesh import TriMesh, box_mesh
from .scene import (Bin, GripperVolume, Instance, MaterialFlags, ObjectModel,
                    ScenarioError, Workspace, build_workspace, collide,
                    load_scenario, min_separation, swept_collide)
from .sensor import CameraIntrinsics, NoiseModel, apply_noise, render, visibility_fraction
from .perception import (Detection, DetectionFailure, DetectionParams,
                         FailureReason, crop_to_region, detect, icp_refine,
                         match_templates, remove_statistical_outliers,
                         voxel_downsample)
from .autoscan import (Template, TemplateLibrary, generate_templates,
                       hemisphere_viewpoints, load_library, save_library,
                       scan_object)
from .grasp import (GraspDatabase, GraspOutcome, GraspPlan, GraspResult,
                    GripperKind, GripperModel, attempt_grasp, feasible,
                    nudge, precompute_grasps, select_grasp)
from .motion import (EePath, NoPathError, PlannerParams, StuckInBinError,
                     UnreachableDepthError, extend_prismatic, plan_path,
                     pre_grasp_pose, retreat)
from .orchestrator import (EpisodeConfig, EpisodeReport, ItemResult, Outcome,
                           WorkItem, WorkOrder, observation_poses,
                           process_item, run_order)
