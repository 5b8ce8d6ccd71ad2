"""The learning loop: alternate global planning and local refinement,
feeding weight updates back, until the path length stops changing.

One iteration walks the robot from the scenario start to the goal.  Inside
an iteration the local planner may rewind and request replans; each such
event counts toward the iteration's request count.  Weight maps persist
across iterations.  User obstacle edits are queued and take effect at the
next iteration boundary, before that iteration's first global plan.
"""
from __future__ import annotations

import io
import json
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import global_planner, local_planner
from .global_planner import GridValidator, PlanningError
from .kinematics import RobotState, standing_height_max
from .local_planner import LocalResult, LocalState, StepBudgetError
from .maps import ActionWeightMap, PositionalWeightMap, VoxelMap, world_to_discrete
from .world import BoxObstacle, Scenario, voxelize

MAX_REQUESTS_PER_ITERATION = 1000

CSV_COLUMNS = "iteration,expansions,path_states,requests,pos_weights_cum,act_weights_cum,wall_time_s"


class OrchestratorError(RuntimeError):
    """Planner failure annotated with the iteration it happened in."""

    def __init__(self, iteration: int, msg: str):
        super().__init__(f"iteration {iteration}: {msg}")
        self.iteration = iteration


class EditError(ValueError):
    pass


@dataclass
class IterationMetrics:
    iteration: int
    global_expansions: int
    path_length_states: int
    request_count: int
    positional_weights_set: int
    action_weights_set: int
    wall_time: float

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "expansions": self.global_expansions,
            "path_states": self.path_length_states,
            "requests": self.request_count,
            "pos_weights_cum": self.positional_weights_set,
            "act_weights_cum": self.action_weights_set,
            "wall_time_s": self.wall_time,
        }


@dataclass
class RunReport:
    iterations: List[IterationMetrics]
    converged: bool
    final_path: List[RobotState]
    total_requests: int
    total_weights: int

    def to_json(self, include_timing: bool = True) -> dict:
        rows = [m.to_json() for m in self.iterations]
        if not include_timing:
            for r in rows:
                r["wall_time_s"] = 0.0
        return {
            "converged": self.converged,
            "iterations": rows,
            "total_requests": self.total_requests,
            "total_weights": self.total_weights,
            "final_path_states": len(self.final_path),
        }

    def to_csv(self, include_timing: bool = True) -> str:
        buf = io.StringIO()
        buf.write(CSV_COLUMNS + "\n")
        for m in self.iterations:
            wt = m.wall_time if include_timing else 0.0
            buf.write(
                f"{m.iteration},{m.global_expansions},{m.path_length_states},"
                f"{m.request_count},{m.positional_weights_set},{m.action_weights_set},"
                f"{wt:.6f}\n"
            )
        return buf.getvalue()


@dataclass
class ObstacleEdit:
    op: str                      # "add" | "remove"
    box: Optional[BoxObstacle] = None
    box_id: Optional[str] = None
    iteration: Optional[int] = None   # apply before this iteration; None = next

    @staticmethod
    def from_json(d: dict) -> "ObstacleEdit":
        op = d.get("op")
        if op not in ("add", "remove"):
            raise EditError(f"unknown edit op {op!r}")
        box = BoxObstacle.from_json(d["box"]) if "box" in d and d["box"] is not None else None
        if op == "add" and box is None:
            raise EditError("add edit requires a box")
        box_id = d.get("id") or (box.id if box is not None else None)
        if op == "remove" and not box_id:
            raise EditError("remove edit requires an id")
        it = d.get("iteration")
        return ObstacleEdit(op=op, box=box, box_id=box_id,
                            iteration=None if it is None else int(it))


def load_edit_script(text: str) -> List[ObstacleEdit]:
    doc = json.loads(text)
    records = doc["edits"] if isinstance(doc, dict) else doc
    edits = [ObstacleEdit.from_json(r) for r in records]
    if any(e.iteration is None for e in edits):
        raise EditError("edit script records must carry an iteration index")
    return edits


class EditQueue:
    """Pending obstacle edits, drained at iteration boundaries."""

    def __init__(self):
        self._pending: List[ObstacleEdit] = []

    def push(self, edit: ObstacleEdit) -> None:
        self._pending.append(edit)

    def drain(self, iteration: int) -> List[ObstacleEdit]:
        due = [e for e in self._pending if e.iteration is None or e.iteration <= iteration]
        self._pending = [e for e in self._pending if not (e.iteration is None or e.iteration <= iteration)]
        return due


def apply_obstacle_edit(boxes: List[BoxObstacle], edit: ObstacleEdit,
                        counter: List[int]) -> List[BoxObstacle]:
    """Apply one user edit to the working box list (user_virtual provenance)."""
    if edit.op == "add":
        box = edit.box
        if box.id is None:
            counter[0] += 1
            box.id = f"user-{counter[0]}"
        box.tag = "user_virtual"
        boxes.append(box)
        return boxes
    ids = [b.id for b in boxes]
    if edit.box_id not in ids:
        raise EditError(f"remove: no obstacle with id {edit.box_id!r}")
    return [b for b in boxes if b.id != edit.box_id]


@dataclass
class LearningSession:
    """Mutable state of one learning run, shared with the service layer."""

    scenario: Scenario
    boxes: List[BoxObstacle] = field(default_factory=list)
    pos_weights: PositionalWeightMap = field(default_factory=PositionalWeightMap)
    act_weights: ActionWeightMap = field(default_factory=ActionWeightMap)
    edit_queue: EditQueue = field(default_factory=EditQueue)
    vmap: Optional[VoxelMap] = None

    def __post_init__(self):
        if not self.boxes:
            self.boxes = list(self.scenario.boxes)
        self._user_counter = [0]

    def reset_weights(self) -> None:
        self.pos_weights.reset()
        self.act_weights.reset()

    def apply_due_edits(self, iteration: int) -> bool:
        due = self.edit_queue.drain(iteration)
        for edit in due:
            self.boxes = apply_obstacle_edit(self.boxes, edit, self._user_counter)
        return bool(due)

    def revoxelize(self, force: bool = True) -> VoxelMap:
        if self.vmap is not None and not force:
            return self.vmap
        working = Scenario(
            boxes=self.boxes,
            start_pose=self.scenario.start_pose,
            goal_pose=self.scenario.goal_pose,
            voxel_resolution=self.scenario.voxel_resolution,
            robot=self.scenario.robot,
            params=self.scenario.params,
        )
        self.vmap = voxelize(working)
        self._validator = None
        return self.vmap

    def validator(self, h_th: float):
        if getattr(self, "_validator", None) is None:
            self._validator = GridValidator(self.vmap, h_th)
        return self._validator


def run_learning(
    scenario: Scenario,
    max_iterations: int = 20,
    edits: Optional[List[ObstacleEdit]] = None,
    session: Optional[LearningSession] = None,
    on_iteration: Optional[Callable] = None,
) -> RunReport:
    """Run the loop until the path length is constant and requests settle,
    or max_iterations is reached."""
    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    if session is None:
        session = LearningSession(scenario=scenario)
    for e in edits or []:
        session.edit_queue.push(e)

    config = scenario.robot
    params = scenario.params
    h_th = standing_height_max(config)
    metrics: List[IterationMetrics] = []
    final_states: List[RobotState] = []
    prev_len: Optional[int] = None
    converged = False

    for iteration in range(1, max_iterations + 1):
        t0 = time.perf_counter()
        edited = session.apply_due_edits(iteration)
        vmap = session.revoxelize(force=edited or session.vmap is None)
        validator = session.validator(h_th)

        start_p, start_yaw = scenario.start_pose
        goal_p, goal_yaw = scenario.goal_pose
        try:
            goal_cell = world_to_discrete(goal_p, vmap)
            local_state = local_planner.initial_local_state(start_p, start_yaw, vmap, config)
        except Exception as e:
            raise OrchestratorError(iteration, f"invalid start/goal: {e}") from e

        expansions = 0
        requests = 0
        states: List[RobotState] = []
        # achieved-waypoint history of the whole walk: (state, length of
        # `states` when it was achieved); rewinds may pop across replans
        history: List = []
        last_blocked = None
        escalation = 0
        while True:
            current_cell = world_to_discrete(local_state.robot.q_p, vmap)
            try:
                gp = global_planner.plan(
                    current_cell, goal_cell, vmap,
                    session.pos_weights, session.act_weights, h_th,
                    validator=validator,
                )
            except PlanningError as e:
                raise OrchestratorError(iteration, f"global planning failed: {e}") from e
            expansions += gp.expansions
            try:
                result: LocalResult = local_planner.refine(
                    gp, local_state, vmap, config, params, h_th, goal_yaw=goal_yaw,
                )
            except StepBudgetError as e:
                raise OrchestratorError(iteration, f"local planning failed: {e}") from e
            prefix = len(states)
            if prefix:
                states.extend(result.states[1:])
                merged = [(st, prefix + n - 1) for st, n in result.snapshots[1:]]
            else:
                states.extend(result.states)
                merged = list(result.snapshots)
            history.extend(merged)
            if not result.replan_requested:
                break
            feedback = list(result.feedback)
            if len(feedback) == 1 and len(history) >= 2:
                # blocked on the plan's first waypoint: the incoming action
                # crosses the replan boundary, so derive it from the walk
                prev_cell = world_to_discrete(history[-2][0].robot.q_p, vmap)
                a = tuple(result.blocked_cell[k] - prev_cell[k] for k in range(3))
                if a != (0, 0, 0) and all(abs(v) <= 1 for v in a):
                    feedback.append(("action", prev_cell, a,
                                     params.action_weight_gain * feedback[0][2]))
            for item in feedback:
                if item[0] == "positional":
                    session.pos_weights.add(item[1], item[2])
                else:
                    session.act_weights.add(item[1], item[2], item[3])
            requests += result.request_count
            if requests > MAX_REQUESTS_PER_ITERATION:
                raise OrchestratorError(iteration, f"request count exceeded {MAX_REQUESTS_PER_ITERATION}")
            # retreat further each time the same cell blocks in a row, so the
            # walk backs out of an unworkable pocket instead of parking in it
            if result.blocked_cell == last_blocked:
                escalation += 1
            else:
                escalation = 0
            last_blocked = result.blocked_cell
            for _ in range(result.rewind_shortfall + escalation):
                if len(history) > 1:
                    history.pop()
            # the resume pose must sit in a cell the global planner accepts
            # (straddling a step edge can leave a valid stance in an invalid
            # cell), so back out further if needed
            while len(history) > 1 and not validator(
                    world_to_discrete(history[-1][0].robot.q_p, vmap)):
                history.pop()
            if history:
                local_state, keep = history[-1]
                local_state = local_state.copy()
                del states[keep:]
            else:
                local_state = result.resume

        row = IterationMetrics(
            iteration=iteration,
            global_expansions=expansions,
            path_length_states=len(states),
            request_count=requests,
            positional_weights_set=session.pos_weights.update_count(),
            action_weights_set=session.act_weights.update_count(),
            wall_time=time.perf_counter() - t0,
        )
        metrics.append(row)
        final_states = states
        if on_iteration is not None:
            on_iteration(row, states, gp)
        if prev_len is not None and len(states) == prev_len and requests <= 1:
            converged = True
            break
        prev_len = len(states)

    return RunReport(
        iterations=metrics,
        converged=converged,
        final_path=final_states,
        total_requests=sum(m.request_count for m in metrics),
        total_weights=session.pos_weights.update_count() + session.act_weights.update_count(),
    )


def export_final_path(states: List[RobotState]) -> str:
    """One JSON array of the 18 state variables per line."""
    lines = [json.dumps(s.as_flat()) for s in states]
    return "\n".join(lines) + ("\n" if lines else "")
