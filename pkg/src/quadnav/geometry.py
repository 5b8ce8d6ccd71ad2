"""Small 3D geometry helpers: rotations, Euler angles, box/cube distance tests.

Rotation convention throughout the package is Z-Y-X (yaw-pitch-roll):
R = Rz(yaw) @ Ry(pitch) @ Rx(roll), with vectors as columns.
"""
from __future__ import annotations

import math

import numpy as np

WORLD_UP = np.array([0.0, 0.0, 1.0])


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_matrix(rpy) -> np.ndarray:
    """Build a rotation matrix from (roll, pitch, yaw)."""
    roll, pitch, yaw = float(rpy[0]), float(rpy[1]), float(rpy[2])
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def matrix_to_euler(r: np.ndarray) -> np.ndarray:
    """Extract (roll, pitch, yaw) from a rotation matrix.

    Uses atan2(R21, R11) for yaw, atan2(-R31, hypot(R32, R33)) for pitch and
    atan2(R32, R33) for roll.  At pitch = +/-pi/2 yaw and roll fuse; the
    convention here is roll = 0 with yaw carrying the fused angle.
    """
    r31 = float(r[2, 0])
    cos_pitch = math.hypot(float(r[2, 1]), float(r[2, 2]))
    pitch = math.atan2(-r31, cos_pitch)
    if cos_pitch < 1e-12:
        # gimbal lock: only yaw - sign(pitch)*roll is observable
        yaw = math.atan2(-float(r[0, 1]), float(r[1, 1]))
        roll = 0.0
    else:
        yaw = math.atan2(float(r[1, 0]), float(r[0, 0]))
        roll = math.atan2(float(r[2, 1]), float(r[2, 2]))
    return np.array([roll, pitch, yaw])


def frame_from_direction(direction: np.ndarray, fallback_yaw: float = 0.0) -> np.ndarray:
    """Right-handed frame whose x axis is `direction` and whose z axis stays
    in the plane spanned by `direction` and the world up vector.

    If `direction` is (anti)parallel to the up vector the y axis is taken
    from `fallback_yaw` so the frame's heading is still defined.
    """
    x = np.asarray(direction, dtype=float)
    n = np.linalg.norm(x)
    if n < 1e-12:
        return rot_z(fallback_yaw)
    x = x / n
    y = np.cross(WORLD_UP, x)
    ny = np.linalg.norm(y)
    if ny < 1e-9:
        y = rot_z(fallback_yaw) @ np.array([0.0, 1.0, 0.0])
        y = y - np.dot(y, x) * x
        y = y / np.linalg.norm(y)
    else:
        y = y / ny
    z = np.cross(x, y)
    return np.column_stack([x, y, z])


def clamp_point_to_aabb(p: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(p, lo), hi)


def point_aabb_distance(p: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> float:
    return float(np.linalg.norm(p - clamp_point_to_aabb(p, lo, hi)))


def segment_aabb_closest(a: np.ndarray, b: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Closest approach between segment [a, b] and an axis-aligned box.

    Returns (t, seg_point, box_point, distance).  The distance from a point
    to a box is convex along the segment, so a fixed ternary search is exact
    enough (well below 1e-9) and fully deterministic.
    """
    t0, t1 = 0.0, 1.0
    for _ in range(80):
        m1 = t0 + (t1 - t0) / 3.0
        m2 = t1 - (t1 - t0) / 3.0
        p1 = a + m1 * (b - a)
        p2 = a + m2 * (b - a)
        if point_aabb_distance(p1, lo, hi) <= point_aabb_distance(p2, lo, hi):
            t1 = m2
        else:
            t0 = m1
    t = 0.5 * (t0 + t1)
    sp = a + t * (b - a)
    bp = clamp_point_to_aabb(sp, lo, hi)
    return t, sp, bp, float(np.linalg.norm(sp - bp))


def obb_aabb_overlap(center: np.ndarray, half: np.ndarray, rot: np.ndarray,
                     lo: np.ndarray, hi: np.ndarray) -> bool:
    """Separating-axis test between an oriented box and an axis-aligned box."""
    a_center = 0.5 * (lo + hi)
    a_half = 0.5 * (hi - lo)
    t = center - a_center
    # axes of the AABB are the world basis; OBB axes are the columns of rot
    eps = 1e-12
    axes = [np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0])]
    obb_axes = [rot[:, 0], rot[:, 1], rot[:, 2]]
    for ax in axes + obb_axes:
        ra = float(np.dot(a_half, np.abs(ax)))
        rb = float(np.abs(rot.T @ ax) @ half)
        if abs(float(np.dot(t, ax))) > ra + rb + eps:
            return False
    for u in axes:
        for v in obb_axes:
            ax = np.cross(u, v)
            n = np.linalg.norm(ax)
            if n < 1e-9:
                continue
            ax = ax / n
            ra = float(np.dot(a_half, np.abs(ax)))
            rb = float(np.abs(rot.T @ ax) @ half)
            if abs(float(np.dot(t, ax))) > ra + rb + eps:
                return False
    return True


def yaw_box_xy_overlap(center, half, yaw, lo, hi, eps=1e-9) -> bool:
    """2D separating-axis test in the xy plane for a yaw-rotated rectangle
    against an axis-aligned rectangle.  Touching contacts (zero area) do not
    count as overlap."""
    cx, cy = center
    hx, hy = half
    acx, acy = 0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])
    ahx, ahy = 0.5 * (hi[0] - lo[0]), 0.5 * (hi[1] - lo[1])
    c, s = math.cos(yaw), math.sin(yaw)
    tx, ty = cx - acx, cy - acy
    # candidate axes: world x/y plus the rectangle's own axes
    for ax, ay in ((1.0, 0.0), (0.0, 1.0), (c, s), (-s, c)):
        ra = ahx * abs(ax) + ahy * abs(ay)
        rb = hx * abs(ax * c + ay * s) + hy * abs(-ax * s + ay * c)
        if abs(tx * ax + ty * ay) >= ra + rb - eps:
            return False
    return True
