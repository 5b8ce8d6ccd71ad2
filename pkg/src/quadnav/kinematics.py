"""Quadruped digital twin: analytic 3-DOF leg kinematics, voxel collision
checks and the surface-support test.

Leg chain per leg: hip abduction (roll about the trunk x axis), hip pitch and
knee pitch (both about y), with link lengths l_abd (lateral), l_thigh and
l_shank.  Legs are ordered FL, FR, RL, RR; left legs carry the abduction link
toward +y, right legs toward -y.  The knee-backward solution branch is fixed
(knee angle >= 0) so the solver is deterministic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .geometry import (
    clamp_point_to_aabb,
    euler_to_matrix,
    obb_aabb_overlap,
    segment_aabb_closest,
)
from .maps import VoxelMap

LEG_NAMES = ("FL", "FR", "RL", "RR")
# +1 for left legs, -1 for right legs
LEG_SIDE = (1.0, -1.0, 1.0, -1.0)


class IkError(ValueError):
    """Inverse kinematics target unreachable or outside joint limits."""

    def __init__(self, msg: str, leg: Optional[int] = None):
        super().__init__(msg if leg is None else f"leg {LEG_NAMES[leg]}: {msg}")
        self.leg = leg


def _default_hip_offsets() -> np.ndarray:
    # hips at the corners of the trunk's bottom face
    return np.array(
        [
            [0.15, 0.08, -0.05],   # FL
            [0.15, -0.08, -0.05],  # FR
            [-0.15, 0.08, -0.05],  # RL
            [-0.15, -0.08, -0.05], # RR
        ]
    )


def _default_joint_limits() -> np.ndarray:
    # (min, max) per joint: abduction, hip pitch, knee
    return np.array([[-0.8, 0.8], [-2.2, 2.2], [0.0, 2.8]])


@dataclass
class RobotConfig:
    """Geometry of the robot body used by collision checks and leg IK."""

    trunk_half_extents: np.ndarray = field(default_factory=lambda: np.array([0.20, 0.10, 0.05]))
    hip_offsets: np.ndarray = field(default_factory=_default_hip_offsets)
    l_abd: float = 0.04
    l_thigh: float = 0.15
    l_shank: float = 0.15
    joint_limits: np.ndarray = field(default_factory=_default_joint_limits)
    foot_contact_tol: float = 0.025
    standing_margin: float = 0.02
    link_radius: float = 0.015

    def __post_init__(self):
        self.trunk_half_extents = np.asarray(self.trunk_half_extents, dtype=float)
        self.hip_offsets = np.asarray(self.hip_offsets, dtype=float)
        self.joint_limits = np.asarray(self.joint_limits, dtype=float)
        if self.l_abd <= 0 or self.l_thigh <= 0 or self.l_shank <= 0:
            raise ValueError("link lengths must be positive")
        if np.any(self.joint_limits[:, 0] >= self.joint_limits[:, 1]):
            raise ValueError("joint limits must satisfy min < max")

    @property
    def max_reach(self) -> float:
        return self.l_abd + self.l_thigh + self.l_shank


@dataclass
class RobotState:
    """18-variable robot state: trunk position, trunk orientation (roll,
    pitch, yaw) and the 4x3 joint angle matrix."""

    q_p: np.ndarray
    q_r: np.ndarray
    theta: np.ndarray

    def copy(self) -> "RobotState":
        return RobotState(self.q_p.copy(), self.q_r.copy(), self.theta.copy())

    def as_flat(self) -> List[float]:
        return [float(v) for v in np.concatenate([self.q_p, self.q_r, self.theta.reshape(-1)])]


def _within_limits(angles, config: RobotConfig, tol: float = 1e-9) -> bool:
    lim = config.joint_limits
    return all(lim[j, 0] - tol <= angles[j] <= lim[j, 1] + tol for j in range(3))


def leg_fk(angles, config: RobotConfig, leg_index: int) -> np.ndarray:
    """Paw position relative to the hip joint, in the trunk frame."""
    t1, t2, t3 = float(angles[0]), float(angles[1]), float(angles[2])
    side = LEG_SIDE[leg_index]
    # planar chain in the sagittal plane, hanging down at zero angles
    px = config.l_thigh * math.sin(t2) + config.l_shank * math.sin(t2 + t3)
    pz = -(config.l_thigh * math.cos(t2) + config.l_shank * math.cos(t2 + t3))
    py = side * config.l_abd
    # abduction rolls the whole leg about the trunk x axis
    a = side * t1
    ca, sa = math.cos(a), math.sin(a)
    return np.array([px, py * ca - pz * sa, py * sa + pz * ca])


def leg_ik(target, config: RobotConfig, leg_index: int) -> np.ndarray:
    """Analytic inverse kinematics for one leg.

    Abduction comes from the frontal-plane projection, thigh and knee from
    the planar two-link subproblem (law of cosines), with the knee-backward
    branch.  Raises IkError when the target is unreachable or violates a
    joint limit.
    """
    x, y, z = (float(v) for v in target)
    side = LEG_SIDE[leg_index]
    if math.sqrt(x * x + y * y + z * z) > config.max_reach + 1e-12:
        raise IkError("target beyond total leg reach", leg_index)
    rho = math.hypot(y, z)
    if rho < config.l_abd - 1e-12:
        raise IkError("target inside abduction-link cylinder", leg_index)
    # frontal plane: rotate (y, z) back by the abduction angle so the lateral
    # offset equals side*l_abd and the remainder hangs below the hip
    ratio = side * config.l_abd / rho if rho > 0 else 1.0
    ratio = min(1.0, max(-1.0, ratio))
    alpha = math.atan2(z, y) + math.acos(ratio)
    t1 = side * alpha
    z_u = -y * math.sin(alpha) + z * math.cos(alpha)
    # planar two-link subproblem in (x, -z_u)
    d2 = x * x + z_u * z_u
    cos_knee = (d2 - config.l_thigh**2 - config.l_shank**2) / (2.0 * config.l_thigh * config.l_shank)
    if cos_knee > 1.0 + 1e-9 or cos_knee < -1.0 - 1e-9:
        raise IkError("planar target unreachable", leg_index)
    t3 = math.acos(min(1.0, max(-1.0, cos_knee)))
    xi = math.atan2(x, -z_u)
    t2 = xi - math.atan2(
        config.l_shank * math.sin(t3), config.l_thigh + config.l_shank * math.cos(t3)
    )
    angles = np.array([_norm_angle(t1), _norm_angle(t2), t3])
    if not _within_limits(angles, config):
        raise IkError(f"solution {angles} outside joint limits", leg_index)
    return angles


def _norm_angle(a: float) -> float:
    while a > math.pi:
        a -= 2.0 * math.pi
    while a < -math.pi:
        a += 2.0 * math.pi
    return a


def hip_world_positions(q_p, q_r, config: RobotConfig) -> np.ndarray:
    r = euler_to_matrix(q_r)
    return np.asarray(q_p, dtype=float) + (r @ config.hip_offsets.T).T


def paw_world_positions(state: RobotState, config: RobotConfig) -> np.ndarray:
    """Forward kinematics of all four paws in world coordinates."""
    r = euler_to_matrix(state.q_r)
    hips = hip_world_positions(state.q_p, state.q_r, config)
    paws = np.empty((4, 3))
    for leg in range(4):
        paws[leg] = hips[leg] + r @ leg_fk(state.theta[leg], config, leg)
    return paws


def solve_state(q_p, q_r, paw_world, config: RobotConfig) -> RobotState:
    """Resolve the full 18-DOF state from trunk pose + world paw targets.

    Raises IkError (annotated with the failing leg) when any leg target is
    unreachable.
    """
    q_p = np.asarray(q_p, dtype=float)
    q_r = np.asarray(q_r, dtype=float)
    r = euler_to_matrix(q_r)
    hips = hip_world_positions(q_p, q_r, config)
    theta = np.empty((4, 3))
    for leg in range(4):
        rel = r.T @ (np.asarray(paw_world[leg], dtype=float) - hips[leg])
        theta[leg] = leg_ik(rel, config, leg)
    return RobotState(q_p.copy(), q_r.copy(), theta)


def standing_height_max(config: RobotConfig) -> float:
    """Maximum height of the trunk bottom above the support surface at which
    all four legs still reach the ground (straight-leg reach minus the
    configured safety margin)."""
    return config.l_thigh + config.l_shank - config.standing_margin


# ---------------------------------------------------------------------------
# collision checking against the voxel map

def _leg_segments(state: RobotState, config: RobotConfig):
    """World-space thigh and shank segments for each leg.  The shank segment
    stops short of the paw so resting ground contact is not a collision."""
    r = euler_to_matrix(state.q_r)
    hips = hip_world_positions(state.q_p, state.q_r, config)
    segs = []
    # the 1.5 factor keeps the capsule end clear of the support surface even
    # when the shank leans well away from vertical
    pullback = (config.link_radius + config.foot_contact_tol) * 1.5
    for leg in range(4):
        t1, t2, t3 = state.theta[leg]
        side = LEG_SIDE[leg]
        a = side * t1
        ca, sa = math.cos(a), math.sin(a)

        def to_trunk(px, py, pz):
            return np.array([px, py * ca - pz * sa, py * sa + pz * ca])

        knee_local = to_trunk(
            config.l_thigh * math.sin(t2), side * config.l_abd, -config.l_thigh * math.cos(t2)
        )
        paw_local = to_trunk(
            config.l_thigh * math.sin(t2) + config.l_shank * math.sin(t2 + t3),
            side * config.l_abd,
            -(config.l_thigh * math.cos(t2) + config.l_shank * math.cos(t2 + t3)),
        )
        hip_w = hips[leg]
        knee_w = hip_w + r @ knee_local
        paw_w = hip_w + r @ paw_local
        shank_dir = paw_w - knee_w
        shank_len = np.linalg.norm(shank_dir)
        if shank_len > pullback:
            shank_end = paw_w - shank_dir / shank_len * pullback
        else:
            shank_end = knee_w
        segs.append((leg, hip_w, knee_w, shank_end, paw_w))
    return segs


def check_collisions(state: RobotState, vmap: VoxelMap, config: RobotConfig):
    """Contacts between the robot body and occupied voxels.

    Returns a list of (p_k, n_k): p_k is the closest point on the voxel cube
    to the colliding primitive's center/axis, n_k the unit direction from p_k
    toward that center/axis (which is the cube face normal for face
    contacts).  Paw contacts within foot_contact_tol below a paw do not
    count.
    """
    r = euler_to_matrix(state.q_r)
    trunk_c = state.q_p
    trunk_h = config.trunk_half_extents
    segs = _leg_segments(state, config)

    # robot-wide AABB to restrict the candidate voxel range
    pts = [trunk_c + r @ (trunk_h * s) for s in _CORNER_SIGNS]
    for _, hip, knee, shank_end, paw in segs:
        pts.extend([hip, knee, shank_end, paw])
    pts = np.array(pts)
    pad = config.link_radius + vmap.resolution
    lo_w = pts.min(axis=0) - pad
    hi_w = pts.max(axis=0) + pad

    res = vmap.resolution
    org = vmap.origin
    blo, bhi = vmap.bounds
    ix0 = max(blo[0], int(math.floor((lo_w[0] - org[0]) / res)))
    iy0 = max(blo[1], int(math.floor((lo_w[1] - org[1]) / res)))
    iz0 = max(blo[2], int(math.floor((lo_w[2] - org[2]) / res)))
    ix1 = min(bhi[0], int(math.floor((hi_w[0] - org[0]) / res)))
    iy1 = min(bhi[1], int(math.floor((hi_w[1] - org[1]) / res)))
    iz1 = min(bhi[2], int(math.floor((hi_w[2] - org[2]) / res)))

    occupied = vmap.occupied
    trunk_reach = float(np.linalg.norm(trunk_h)) + res
    contacts = []
    for ix in range(ix0, ix1 + 1):
        for iy in range(iy0, iy1 + 1):
            for iz in range(iz0, iz1 + 1):
                cell = (ix, iy, iz)
                if cell not in occupied:
                    continue
                c_lo = org + np.array(cell, dtype=float) * res
                c_hi = c_lo + res
                contact = _cell_contacts(cell, c_lo, c_hi, trunk_c, trunk_h, r,
                                         trunk_reach, segs, config)
                contacts.extend(contact)
    return contacts


_CORNER_SIGNS = [np.array(s, dtype=float) for s in
                 [(sx, sy, sz) for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]]


def _cell_contacts(cell, c_lo, c_hi, trunk_c, trunk_h, rot, trunk_reach, segs, config):
    out = []
    center = 0.5 * (c_lo + c_hi)
    # trunk box
    if np.linalg.norm(center - trunk_c) <= trunk_reach + 0.5 * math.sqrt(3) * (c_hi[0] - c_lo[0]):
        if obb_aabb_overlap(trunk_c, trunk_h, rot, c_lo, c_hi):
            p_k = clamp_point_to_aabb(trunk_c, c_lo, c_hi)
            n_k = _contact_normal(trunk_c - p_k)
            out.append((p_k, n_k))
    radius = config.link_radius
    for leg, hip, knee, shank_end, paw in segs:
        for a, b in ((hip, knee), (knee, shank_end)):
            if _segment_aabb_prefilter(a, b, c_lo, c_hi, radius):
                _, sp, bp, dist = segment_aabb_closest(a, b, c_lo, c_hi)
                if dist <= radius:
                    out.append((bp, _contact_normal(sp - bp)))
        # paw point: inside the cube and deeper than the resting tolerance
        if (c_lo[0] <= paw[0] < c_hi[0] and c_lo[1] <= paw[1] < c_hi[1]
                and c_lo[2] <= paw[2] < c_hi[2]):
            if c_hi[2] - paw[2] > config.foot_contact_tol:
                p_k = paw.copy()
                out.append((p_k, _contact_normal(np.array([0.0, 0.0, c_hi[2]]) - p_k)))
    return out


def _segment_aabb_prefilter(a, b, lo, hi, radius) -> bool:
    s_lo = np.minimum(a, b) - radius
    s_hi = np.maximum(a, b) + radius
    return bool(np.all(s_lo <= hi) and np.all(s_hi >= lo))


def _contact_normal(direction: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(direction)
    if n < 1e-12:
        return np.array([0.0, 0.0, 1.0])
    return direction / n


def check_trunk_collisions(q_p, q_r, vmap: VoxelMap, config: RobotConfig):
    """Contacts of the trunk box alone (used when leg poses are undefined)."""
    r = euler_to_matrix(np.asarray(q_r, float))
    trunk_c = np.asarray(q_p, float)
    trunk_h = config.trunk_half_extents
    pts = np.array([trunk_c + r @ (trunk_h * s) for s in _CORNER_SIGNS])
    pad = vmap.resolution
    lo_w = pts.min(axis=0) - pad
    hi_w = pts.max(axis=0) + pad
    res = vmap.resolution
    org = vmap.origin
    blo, bhi = vmap.bounds
    contacts = []
    ix0 = max(blo[0], int(math.floor((lo_w[0] - org[0]) / res)))
    iy0 = max(blo[1], int(math.floor((lo_w[1] - org[1]) / res)))
    iz0 = max(blo[2], int(math.floor((lo_w[2] - org[2]) / res)))
    ix1 = min(bhi[0], int(math.floor((hi_w[0] - org[0]) / res)))
    iy1 = min(bhi[1], int(math.floor((hi_w[1] - org[1]) / res)))
    iz1 = min(bhi[2], int(math.floor((hi_w[2] - org[2]) / res)))
    for ix in range(ix0, ix1 + 1):
        for iy in range(iy0, iy1 + 1):
            for iz in range(iz0, iz1 + 1):
                cell = (ix, iy, iz)
                if cell not in vmap.occupied:
                    continue
                c_lo = org + np.array(cell, dtype=float) * res
                c_hi = c_lo + res
                if obb_aabb_overlap(trunk_c, trunk_h, r, c_lo, c_hi):
                    p_k = clamp_point_to_aabb(trunk_c, c_lo, c_hi)
                    contacts.append((p_k, _contact_normal(trunk_c - p_k)))
    return contacts


def support_count(state: RobotState, vmap: VoxelMap, config: RobotConfig) -> int:
    """How many paws rest on a support surface (vertical gap to the top face
    of the occupied voxel directly below is within foot_contact_tol)."""
    paws = paw_world_positions(state, config)
    count = 0
    for leg in range(4):
        top = vmap.top_surface_below(paws[leg])
        if top is not None and abs(paws[leg][2] - top) <= config.foot_contact_tol:
            count += 1
    return count
