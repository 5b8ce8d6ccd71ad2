"""Scenario definition and voxelization.

A scenario is a list of yaw-rotated box obstacles plus start/goal trunk
poses, the voxel resolution, the robot geometry and the local-planner
parameters.  Scenario files are JSON documents (see docs/scenario_schema.md
for the exact schema and a validating example).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .geometry import yaw_box_xy_overlap
from .kinematics import RobotConfig
from .local_planner import PropagationParams
from .maps import TAG_TERRAIN, TAG_USER, VoxelMap

WORLD_MARGIN = 0.5  # padding added around the boxes' bounding box, meters
MAX_CELLS_DEFAULT = 4_000_000


class ScenarioError(ValueError):
    """Malformed or invalid scenario document."""


@dataclass
class BoxObstacle:
    center: np.ndarray
    half_extents: np.ndarray
    yaw: float = 0.0
    tag: str = TAG_TERRAIN
    id: Optional[str] = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.half_extents = np.asarray(self.half_extents, dtype=float)
        if np.any(self.half_extents <= 0):
            raise ScenarioError(f"box half_extents must be positive, got {self.half_extents}")
        if self.tag not in (TAG_TERRAIN, TAG_USER):
            raise ScenarioError(f"unknown box tag {self.tag!r}")

    def aabb(self) -> Tuple[np.ndarray, np.ndarray]:
        """World axis-aligned bounds of the yaw-rotated box."""
        c, s = abs(math.cos(self.yaw)), abs(math.sin(self.yaw))
        hx = self.half_extents[0] * c + self.half_extents[1] * s
        hy = self.half_extents[0] * s + self.half_extents[1] * c
        ext = np.array([hx, hy, self.half_extents[2]])
        return self.center - ext, self.center + ext

    def to_json(self) -> dict:
        d = {
            "center": [float(v) for v in self.center],
            "half_extents": [float(v) for v in self.half_extents],
            "yaw": float(self.yaw),
            "tag": self.tag,
        }
        if self.id is not None:
            d["id"] = self.id
        return d

    @staticmethod
    def from_json(d: dict) -> "BoxObstacle":
        try:
            return BoxObstacle(
                center=d["center"],
                half_extents=d["half_extents"],
                yaw=float(d.get("yaw", 0.0)),
                tag=d.get("tag", TAG_TERRAIN),
                id=d.get("id"),
            )
        except KeyError as e:
            raise ScenarioError(f"box record missing field {e}") from e


@dataclass
class Scenario:
    boxes: List[BoxObstacle]
    start_pose: Tuple[np.ndarray, float]
    goal_pose: Tuple[np.ndarray, float]
    voxel_resolution: float = 0.05
    robot: RobotConfig = field(default_factory=RobotConfig)
    params: PropagationParams = field(default_factory=PropagationParams)

    def __post_init__(self):
        if self.voxel_resolution <= 0:
            raise ScenarioError("voxel_resolution must be positive")
        sp = np.asarray(self.start_pose[0], dtype=float)
        gp = np.asarray(self.goal_pose[0], dtype=float)
        self.start_pose = (sp, float(self.start_pose[1]))
        self.goal_pose = (gp, float(self.goal_pose[1]))
        lo, hi = self.world_bounds()
        for name, p in (("start", sp), ("goal", gp)):
            if np.any(p < lo) or np.any(p > hi):
                raise ScenarioError(f"{name} pose {p.tolist()} outside world bounds")
        res = self.voxel_resolution
        if np.all(np.floor((sp - lo) / res) == np.floor((gp - lo) / res)):
            raise ScenarioError("start and goal discretize to the same cell")

    def world_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """Bounding box of all obstacles plus start/goal, padded by a margin."""
        los, his = [], []
        for b in self.boxes:
            lo, hi = b.aabb()
            los.append(lo)
            his.append(hi)
        los.append(np.asarray(self.start_pose[0], dtype=float))
        his.append(np.asarray(self.start_pose[0], dtype=float))
        los.append(np.asarray(self.goal_pose[0], dtype=float))
        his.append(np.asarray(self.goal_pose[0], dtype=float))
        lo = np.min(np.array(los), axis=0) - WORLD_MARGIN
        hi = np.max(np.array(his), axis=0) + WORLD_MARGIN
        return lo, hi


def generate_stairs(steps: int, rise: float = 0.1, run: float = 0.3,
                    width: float = 1.0) -> List[BoxObstacle]:
    """Axis-aligned staircase along +x: box i spans [i*run, (i+1)*run] in x
    and its top face sits at height (i+1)*rise."""
    if steps < 1:
        raise ScenarioError("steps must be >= 1")
    if rise <= 0 or run <= 0 or width <= 0:
        raise ScenarioError("stair dimensions must be positive")
    boxes = []
    for i in range(steps):
        top = (i + 1) * rise
        boxes.append(
            BoxObstacle(
                center=[(i + 0.5) * run, 0.0, top / 2.0],
                half_extents=[run / 2.0, width / 2.0, top / 2.0],
                id=f"step-{i}",
            )
        )
    return boxes


def load_scenario(text: str) -> Scenario:
    """Parse and validate a scenario JSON document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"malformed scenario document: {e}") from e
    return scenario_from_json(doc)


def scenario_from_json(doc: dict) -> Scenario:
    for key in ("boxes", "start", "goal", "resolution"):
        if key not in doc:
            raise ScenarioError(f"scenario document missing key {key!r}")
    boxes = [BoxObstacle.from_json(b) for b in doc["boxes"]]
    start = (np.asarray(doc["start"]["position"], dtype=float), float(doc["start"].get("yaw", 0.0)))
    goal = (np.asarray(doc["goal"]["position"], dtype=float), float(doc["goal"].get("yaw", 0.0)))
    robot = _robot_from_json(doc.get("robot", {}))
    params = _params_from_json(doc.get("params", {}))
    return Scenario(
        boxes=boxes,
        start_pose=start,
        goal_pose=goal,
        voxel_resolution=float(doc["resolution"]),
        robot=robot,
        params=params,
    )


def save_scenario(s: Scenario) -> str:
    return json.dumps(scenario_to_json(s), indent=2, sort_keys=True) + "\n"


def scenario_to_json(s: Scenario) -> dict:
    return {
        "boxes": [b.to_json() for b in s.boxes],
        "start": {"position": [float(v) for v in s.start_pose[0]], "yaw": s.start_pose[1]},
        "goal": {"position": [float(v) for v in s.goal_pose[0]], "yaw": s.goal_pose[1]},
        "resolution": s.voxel_resolution,
        "robot": _robot_to_json(s.robot),
        "params": _params_to_json(s.params),
    }


def _robot_to_json(r: RobotConfig) -> dict:
    return {
        "trunk_half_extents": [float(v) for v in r.trunk_half_extents],
        "hip_offsets": [[float(v) for v in row] for row in r.hip_offsets],
        "l_abd": r.l_abd,
        "l_thigh": r.l_thigh,
        "l_shank": r.l_shank,
        "joint_limits": [[float(v) for v in row] for row in r.joint_limits],
        "foot_contact_tol": r.foot_contact_tol,
        "standing_margin": r.standing_margin,
        "link_radius": r.link_radius,
    }


def _robot_from_json(d: dict) -> RobotConfig:
    kwargs = {}
    for key in ("l_abd", "l_thigh", "l_shank", "foot_contact_tol",
                "standing_margin", "link_radius"):
        if key in d:
            kwargs[key] = float(d[key])
    for key in ("trunk_half_extents", "hip_offsets", "joint_limits"):
        if key in d:
            kwargs[key] = np.asarray(d[key], dtype=float)
    try:
        return RobotConfig(**kwargs)
    except ValueError as e:
        raise ScenarioError(f"invalid robot config: {e}") from e


def _params_to_json(p: PropagationParams) -> dict:
    return {
        "delta_p_max": p.delta_p_max,
        "delta_r_max": p.delta_r_max,
        "back_off_shift_j": p.back_off_shift_j,
        "max_steps_per_waypoint": p.max_steps_per_waypoint,
        "action_weight_gain": p.action_weight_gain,
        "max_propagation_steps": p.max_propagation_steps,
        "swing_trigger": p.swing_trigger,
        "swing_steps": p.swing_steps,
        "step_clearance": p.step_clearance,
        "swing_lead": p.swing_lead,
    }


def _params_from_json(d: dict) -> PropagationParams:
    kwargs = {}
    for key in ("delta_p_max", "delta_r_max", "action_weight_gain",
                "swing_trigger", "step_clearance", "swing_lead"):
        if key in d:
            kwargs[key] = float(d[key])
    for key in ("back_off_shift_j", "max_steps_per_waypoint",
                "max_propagation_steps", "swing_steps"):
        if key in d:
            kwargs[key] = int(d[key])
    try:
        return PropagationParams(**kwargs)
    except ValueError as e:
        raise ScenarioError(f"invalid params: {e}") from e


def voxelize(scenario: Scenario, max_cells: int = MAX_CELLS_DEFAULT) -> VoxelMap:
    """Discretize the scenario's boxes onto the grid.

    A cell is occupied iff its cube has a positive-volume intersection with
    at least one box; cells touched only on a face/edge stay free so that
    surfaces landing exactly on cell boundaries do not bleed upward.
    User-placed boxes win the provenance tag on overlap.
    """
    res = scenario.voxel_resolution
    lo_w, hi_w = scenario.world_bounds()
    origin = lo_w
    n = np.ceil((hi_w - lo_w) / res).astype(int)
    total = int(n[0]) * int(n[1]) * int(n[2])
    if total > max_cells:
        raise ScenarioError(f"world needs {total} cells at resolution {res}, over the {max_cells} cell limit")
    bounds = ((0, 0, 0), (int(n[0]) - 1, int(n[1]) - 1, int(n[2]) - 1))
    vmap = VoxelMap(resolution=res, origin=origin, bounds=bounds)
    for box in scenario.boxes:
        _mark_box(vmap, box)
    return vmap


def _mark_box(vmap: VoxelMap, box: BoxObstacle) -> None:
    res = vmap.resolution
    org = vmap.origin
    blo, bhi = vmap.bounds
    lo, hi = box.aabb()
    eps = 1e-9 * res
    i0 = [max(blo[k], int(math.floor((lo[k] - org[k]) / res + eps))) for k in range(3)]
    i1 = [min(bhi[k], int(math.ceil((hi[k] - org[k]) / res - eps)) - 1) for k in range(3)]
    axis_aligned = abs(math.sin(box.yaw)) < 1e-12 or abs(math.cos(box.yaw)) < 1e-12
    user = box.tag == TAG_USER
    occ = vmap.occupied
    for ix in range(i0[0], i1[0] + 1):
        for iy in range(i0[1], i1[1] + 1):
            if not axis_aligned:
                c_lo = (org[0] + ix * res, org[1] + iy * res)
                c_hi = (c_lo[0] + res, c_lo[1] + res)
                if not yaw_box_xy_overlap(
                    (box.center[0], box.center[1]),
                    (box.half_extents[0], box.half_extents[1]),
                    box.yaw, c_lo, c_hi, eps=eps,
                ):
                    continue
            for iz in range(i0[2], i1[2] + 1):
                cell = (ix, iy, iz)
                if user or cell not in occ:
                    occ[cell] = box.tag if not user else TAG_USER
