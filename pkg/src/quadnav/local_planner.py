"""Local refinement of a global cell path into a sequence of full robot
states.

Per step the planner computes the translation toward the current waypoint
(shifted by the accumulated repulsive vector), derives the rotation that
aligns the trunk with the travel direction, clamps both, propagates the
trunk while stance paws stay planted, runs a simple one-leg-at-a-time gait,
and validates the candidate (collision-free, leg IK solvable, at least three
paws supported).  Invalid candidates produce a repulsive vector that
accumulates; once the shifted waypoint leaves the waypoint's grid cell the
planner records weight feedback for the global layer, rewinds to an earlier
achieved waypoint and requests a replan.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import euler_to_matrix, frame_from_direction, matrix_to_euler, rot_z
from .global_planner import GlobalPath
from .kinematics import (
    IkError,
    LEG_SIDE,
    RobotConfig,
    RobotState,
    check_collisions,
    check_trunk_collisions,
    hip_world_positions,
    paw_world_positions,
    solve_state,
)
from .maps import Cell, VoxelMap, world_to_discrete_unchecked


class StepBudgetError(RuntimeError):
    """The propagation step budget ran out before the goal or a replan."""


@dataclass
class PropagationParams:
    delta_p_max: float = 0.03           # max trunk translation per step, m
    delta_r_max: float = 0.05           # max rotation-vector norm per step, rad
    back_off_shift_j: int = 1           # extra waypoints to rewind past
    max_steps_per_waypoint: int = 500
    action_weight_gain: float = 1.0
    max_propagation_steps: int = 100_000
    # gait tuning
    swing_trigger: float = 0.03         # accumulated hip travel that triggers a step, m
    swing_steps: int = 1                # propagation steps one swing takes
    step_clearance: float = 0.1         # mid-swing paw lift, m
    swing_lead: float = 0.07            # how far ahead of the hip a paw replants, m
    stretch_fraction: float = 0.88      # leg extension that forces a replant

    def __post_init__(self):
        for name in ("delta_p_max", "delta_r_max", "max_steps_per_waypoint",
                     "action_weight_gain", "max_propagation_steps",
                     "swing_trigger", "swing_steps", "step_clearance", "swing_lead"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.back_off_shift_j < 0:
            raise ValueError("back_off_shift_j must be >= 0")


@dataclass
class LocalState:
    """Robot state plus the local planner's bookkeeping."""

    robot: RobotState
    paw_world: np.ndarray
    accumulated_swing: np.ndarray = field(default_factory=lambda: np.zeros(4))
    swing_leg: Optional[int] = None
    swing_start: Optional[np.ndarray] = None
    swing_target: Optional[np.ndarray] = None
    swing_step: int = 0
    accumulated_d: np.ndarray = field(default_factory=lambda: np.zeros(3))
    waypoint_index: int = 0

    def copy(self) -> "LocalState":
        return LocalState(
            robot=self.robot.copy(),
            paw_world=self.paw_world.copy(),
            accumulated_swing=self.accumulated_swing.copy(),
            swing_leg=self.swing_leg,
            swing_start=None if self.swing_start is None else self.swing_start.copy(),
            swing_target=None if self.swing_target is None else self.swing_target.copy(),
            swing_step=self.swing_step,
            accumulated_d=self.accumulated_d.copy(),
            waypoint_index=self.waypoint_index,
        )


# feedback records: ("positional", cell, delta) or ("action", cell, action, delta)
FeedbackItem = Tuple


@dataclass
class LocalResult:
    states: List[RobotState]
    feedback: List[FeedbackItem]
    replan_requested: bool
    request_count: int
    resume: Optional[LocalState] = None
    blocked_cell: Optional[Cell] = None
    steps_used: int = 0
    # achieved-waypoint snapshots kept after any truncation, as
    # (state, length of `states` at that moment); snapshots[0] is the call
    # start.  The caller keeps these to rewind across replan boundaries.
    snapshots: List[Tuple["LocalState", int]] = field(default_factory=list)
    # how many achieved waypoints beyond this call's start the rewind still
    # owes (nonzero when i - 1 - j reaches past the current plan)
    rewind_shortfall: int = 0


@dataclass
class ValidationReport:
    valid: bool
    collisions: list
    ik_failed: bool
    support: int
    robot: Optional[RobotState] = None


def compute_delta_p(g_i, d, q_p) -> np.ndarray:
    """Translation toward the repulsion-shifted waypoint target."""
    return np.asarray(g_i, float) + np.asarray(d, float) - np.asarray(q_p, float)


def compute_rotation_delta(o_i: np.ndarray, delta_p: np.ndarray, fallback_yaw: float = 0.0) -> np.ndarray:
    """Rotation vector (roll, pitch, yaw) taking the current trunk frame to
    the travel frame built from delta_p and the world up axis."""
    o_g = frame_from_direction(delta_p, fallback_yaw=fallback_yaw)
    return matrix_to_euler(o_i.T @ o_g)


def clamp_deltas(delta_p: np.ndarray, delta_r: np.ndarray, params: PropagationParams):
    dp = np.asarray(delta_p, float)
    dr = np.asarray(delta_r, float)
    np_norm = np.linalg.norm
    n = np_norm(dp)
    if n > params.delta_p_max:
        dp = dp * (params.delta_p_max / n)
    n = np_norm(dr)
    if n > params.delta_r_max:
        dr = dr * (params.delta_r_max / n)
    return dp, dr


def propagate(state: LocalState, dp: np.ndarray, dr: np.ndarray, config: RobotConfig) -> LocalState:
    """Apply the clamped step transform: translate and rotate the trunk,
    keep stance paws planted, accumulate per-leg hip travel."""
    nxt = state.copy()
    old_hips = hip_world_positions(state.robot.q_p, state.robot.q_r, config)
    nxt.robot.q_p = state.robot.q_p + dp
    r_next = euler_to_matrix(state.robot.q_r) @ euler_to_matrix(dr)
    nxt.robot.q_r = matrix_to_euler(r_next)
    new_hips = hip_world_positions(nxt.robot.q_p, nxt.robot.q_r, config)
    nxt.accumulated_swing = state.accumulated_swing + np.linalg.norm(new_hips - old_hips, axis=1)
    return nxt


def select_swing_leg(state: LocalState, params: PropagationParams) -> Optional[int]:
    """Leg with the largest accumulated hip travel, if it exceeds the
    trigger; ties resolve to the lowest leg index (FL, FR, RL, RR)."""
    idx = int(np.argmax(state.accumulated_swing))
    if state.accumulated_swing[idx] > params.swing_trigger:
        return idx
    return None


def compute_repulsive(q_next, collisions: Sequence, h_th: float) -> np.ndarray:
    """Mean of (q - p_k + n_k) over contacts; straight down by h_th when
    there are no contacts."""
    n = len(collisions)
    if n == 0:
        return np.array([0.0, 0.0, -h_th])
    q = np.asarray(q_next, float)
    acc = np.zeros(3)
    for p_k, n_k in collisions:
        acc = acc + (q - np.asarray(p_k, float) + np.asarray(n_k, float))
    return acc / n


def validate(state: RobotState, vmap: VoxelMap, config: RobotConfig) -> ValidationReport:
    """Stand-alone validity check of a full robot state."""
    paws = paw_world_positions(state, config)
    return _validate_candidate(state.q_p, state.q_r, paws, None, vmap, config)


def _validate_candidate(q_p, q_r, paw_world, swing_leg: Optional[int],
                        vmap: VoxelMap, config: RobotConfig) -> ValidationReport:
    try:
        robot = solve_state(q_p, q_r, paw_world, config)
        ik_failed = False
    except IkError:
        robot = None
        ik_failed = True
    if robot is not None:
        collisions = check_collisions(robot, vmap, config)
    else:
        # legs have no defined pose; only the trunk box can report contacts
        collisions = check_trunk_collisions(q_p, q_r, vmap, config)
    support = 0
    off_legs = []
    for leg in range(4):
        top = vmap.top_surface_below(paw_world[leg])
        if top is not None and abs(paw_world[leg][2] - top) <= config.foot_contact_tol:
            support += 1
        else:
            off_legs.append(leg)
    valid = (
        not ik_failed
        and not collisions
        and support >= 3
        and all(leg == swing_leg for leg in off_legs)
    )
    return ValidationReport(valid=valid, collisions=collisions, ik_failed=ik_failed,
                            support=support, robot=robot)


def neutral_paw_xy(hips: np.ndarray, q_r, config: RobotConfig) -> np.ndarray:
    """Per-leg neutral paw xy: under the hip, offset laterally by l_abd."""
    r = euler_to_matrix(q_r)
    out = np.empty((4, 2))
    for leg in range(4):
        lateral = r @ np.array([0.0, LEG_SIDE[leg] * config.l_abd, 0.0])
        out[leg] = hips[leg, :2] + lateral[:2]
    return out


def initial_local_state(trunk_pos, yaw: float, vmap: VoxelMap, config: RobotConfig) -> LocalState:
    """Standing state at a trunk pose: paws at their neutral points dropped
    onto the support surface below."""
    q_p = np.asarray(trunk_pos, float)
    q_r = np.array([0.0, 0.0, float(yaw)])
    hips = hip_world_positions(q_p, q_r, config)
    paw_xy = neutral_paw_xy(hips, q_r, config)
    paws = np.empty((4, 3))
    for leg in range(4):
        probe = np.array([paw_xy[leg, 0], paw_xy[leg, 1], hips[leg, 2]])
        top = vmap.top_surface_below(probe)
        paws[leg] = [paw_xy[leg, 0], paw_xy[leg, 1],
                     top if top is not None else hips[leg, 2] - (config.l_thigh + config.l_shank)]
    robot = solve_state(q_p, q_r, paws, config)
    return LocalState(robot=robot, paw_world=paws)


# keep this much vertical fold room between hip and a planted/lifted paw
MIN_FOLD_ROOM = 0.10


def _swing_target(state: LocalState, leg: int, motion_dir: np.ndarray,
                  vmap: VoxelMap, config: RobotConfig, params: PropagationParams) -> np.ndarray:
    """Footstep for a swing: the leg's neutral point projected ahead along
    the motion, dropped onto the support surface.  If the landing there
    leaves too little fold room (a riser directly ahead), the lead shrinks
    until the paw stays plantable; worst case it replants in place."""
    hips = hip_world_positions(state.robot.q_p, state.robot.q_r, config)
    base_xy = neutral_paw_xy(hips, state.robot.q_r, config)[leg]
    hip_z = float(hips[leg, 2])
    d_xy = motion_dir[:2]
    n = np.linalg.norm(d_xy)
    if n > 1e-9:
        ahead = d_xy / n
    else:
        fwd = (euler_to_matrix(state.robot.q_r) @ np.array([1.0, 0.0, 0.0]))[:2]
        nf = np.linalg.norm(fwd)
        ahead = fwd / nf if nf > 1e-9 else np.array([1.0, 0.0])
    reach = config.l_thigh + config.l_shank
    best = None
    for factor in (1.0, 0.5, 0.0):
        xy = base_xy + ahead * (params.swing_lead * factor)
        top = vmap.top_surface_below(np.array([xy[0], xy[1], hip_z]))
        if top is None:
            continue
        drop = hip_z - top
        if MIN_FOLD_ROOM <= drop <= reach - 0.02:
            return np.array([xy[0], xy[1], top])
        if best is None:
            best = np.array([xy[0], xy[1], top])
    if best is not None:
        return best
    # nothing below at all: replant in place on whatever supports the paw now
    top = vmap.top_surface_below(state.paw_world[leg])
    z = top if top is not None else float(state.paw_world[leg, 2])
    return np.array([state.paw_world[leg, 0], state.paw_world[leg, 1], z])


def _leg_stretch(state: LocalState, config: RobotConfig) -> np.ndarray:
    hips = hip_world_positions(state.robot.q_p, state.robot.q_r, config)
    return np.linalg.norm(state.paw_world - hips, axis=1)


def _advance_swing(cand: LocalState, motion_dir: np.ndarray, vmap: VoxelMap,
                   config: RobotConfig, params: PropagationParams) -> None:
    """Run the gait for one propagation step on the candidate state."""
    if cand.swing_leg is None:
        leg = select_swing_leg(cand, params)
        if leg is None:
            # replant a leg nearing its reach limit even below the trigger
            stretch = _leg_stretch(cand, config)
            worst = int(np.argmax(stretch))
            if stretch[worst] > params.stretch_fraction * (config.l_thigh + config.l_shank + config.l_abd):
                leg = worst
        if leg is None:
            return
        cand.swing_leg = leg
        cand.swing_start = cand.paw_world[leg].copy()
        cand.swing_target = _swing_target(cand, leg, motion_dir, vmap, config, params)
        cand.swing_step = 0
    leg = cand.swing_leg
    cand.swing_step += 1
    frac = cand.swing_step / params.swing_steps
    if frac >= 1.0:
        cand.paw_world[leg] = cand.swing_target
        cand.swing_leg = None
        cand.swing_start = None
        cand.swing_target = None
        cand.swing_step = 0
        cand.accumulated_swing[leg] = 0.0
    else:
        hips = hip_world_positions(cand.robot.q_p, cand.robot.q_r, config)
        lift = params.step_clearance * 4.0 * frac * (1.0 - frac)
        pos = cand.swing_start + frac * (cand.swing_target - cand.swing_start)
        # never lift so far that the leg loses its fold room
        max_z = float(hips[leg, 2]) - MIN_FOLD_ROOM
        cand.paw_world[leg] = np.array([pos[0], pos[1], min(pos[2] + lift, max_z)])


def refine(
    global_path: GlobalPath,
    start: LocalState,
    vmap: VoxelMap,
    config: RobotConfig,
    params: PropagationParams,
    h_th: float,
    goal_yaw: float = 0.0,
) -> LocalResult:
    """Walk the waypoint list; returns either the full state sequence, or a
    replan request carrying weight feedback and the rewound state."""
    cells = global_path.states
    waypoints = [vmap.cell_center(c) for c in cells]
    state = start.copy()
    state.accumulated_d = np.zeros(3)
    states_out: List[RobotState] = [state.robot.copy()]
    # snapshots[k] = state after achieving waypoint k-1 (index 0 = call start)
    snapshots: List[Tuple[LocalState, int]] = [(state.copy(), 1)]
    steps_total = 0

    i = 0
    while i < len(waypoints):
        g_i = waypoints[i]
        last = i == len(waypoints) - 1
        waypoint_steps = 0
        while True:
            delta_p = compute_delta_p(g_i, state.accumulated_d, state.robot.q_p)
            o_i = euler_to_matrix(state.robot.q_r)
            if last:
                delta_r = matrix_to_euler(o_i.T @ rot_z(goal_yaw))
            else:
                delta_r = compute_rotation_delta(o_i, delta_p, fallback_yaw=float(state.robot.q_r[2]))
            dp_hat, dr_hat = clamp_deltas(delta_p, delta_r, params)
            achieved = float(np.linalg.norm(dp_hat)) < params.delta_p_max
            if last:
                achieved = achieved and float(np.linalg.norm(dr_hat)) < params.delta_r_max
            if achieved:
                state.accumulated_d = np.zeros(3)
                state.waypoint_index = i + 1
                snapshots.append((state.copy(), len(states_out)))
                break

            if steps_total >= params.max_propagation_steps:
                raise StepBudgetError(
                    f"propagation budget {params.max_propagation_steps} exhausted at waypoint {i}"
                )
            steps_total += 1
            waypoint_steps += 1

            cand = propagate(state, dp_hat, dr_hat, config)
            _advance_swing(cand, dp_hat, vmap, config, params)
            report = _validate_candidate(cand.robot.q_p, cand.robot.q_r, cand.paw_world,
                                         cand.swing_leg, vmap, config)
            if report.valid:
                cand.robot = report.robot
                state = cand
                states_out.append(report.robot.copy())
                continue

            d_new = compute_repulsive(cand.robot.q_p, report.collisions, h_th)
            state.accumulated_d = state.accumulated_d + d_new
            shifted_cell = world_to_discrete_unchecked(g_i + state.accumulated_d, vmap)
            if shifted_cell != cells[i] or waypoint_steps > params.max_steps_per_waypoint:
                dn = float(np.linalg.norm(state.accumulated_d))
                if dn == 0.0:
                    dn = h_th
                feedback: List[FeedbackItem] = [("positional", cells[i], dn)]
                if i > 0:
                    a = (cells[i][0] - cells[i - 1][0],
                         cells[i][1] - cells[i - 1][1],
                         cells[i][2] - cells[i - 1][2])
                    feedback.append(("action", cells[i - 1], a, params.action_weight_gain * dn))
                # rewind to waypoint i-1-j; snapshot index is that plus one
                back = i - 1 - params.back_off_shift_j + 1
                shortfall = max(0, -back)
                back = max(0, back)
                resume, keep = snapshots[back]
                del states_out[keep:]
                resume = resume.copy()
                resume.accumulated_d = np.zeros(3)
                return LocalResult(
                    states=states_out,
                    feedback=feedback,
                    replan_requested=True,
                    request_count=1,
                    resume=resume,
                    blocked_cell=cells[i],
                    steps_used=steps_total,
                    snapshots=snapshots[: back + 1],
                    rewind_shortfall=shortfall,
                )
        i += 1

    return LocalResult(states=states_out, feedback=[], replan_requested=False,
                       request_count=0, resume=None, steps_used=steps_total,
                       snapshots=snapshots)
