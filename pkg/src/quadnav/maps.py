"""Voxel occupancy map plus the positional and action weight maps.

Grid cells are integer (x, y, z) triples.  The z axis is the gravity axis:
"below" always means decreasing z.  Weight maps are sparse dictionaries in
which an unwritten key reads as 0.0; weights only ever grow within a run and
every update is logged with a monotone sequence number so the setting
dynamics can be exported and plotted.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

Cell = Tuple[int, int, int]
ActionT = Tuple[int, int, int]

TAG_TERRAIN = "terrain"
TAG_USER = "user_virtual"

# the 26 moves to adjacent cells, in a fixed deterministic order
ACTIONS: Tuple[ActionT, ...] = tuple(
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
)

ACTION_NORMS: Dict[ActionT, float] = {a: math.sqrt(a[0] ** 2 + a[1] ** 2 + a[2] ** 2) for a in ACTIONS}


class OutOfBoundsError(ValueError):
    """A world point or cell index fell outside the map bounds."""


@dataclass
class VoxelMap:
    """Sparse occupancy grid with provenance tags.

    occupied maps cell -> tag ('terrain' or 'user_virtual');
    bounds are inclusive index ranges (min_cell, max_cell).
    """

    resolution: float
    origin: np.ndarray
    bounds: Tuple[Cell, Cell]
    occupied: Dict[Cell, str] = field(default_factory=dict)

    def in_bounds(self, cell: Cell) -> bool:
        lo, hi = self.bounds
        return all(lo[i] <= cell[i] <= hi[i] for i in range(3))

    def is_occupied(self, cell: Cell) -> bool:
        return cell in self.occupied

    def cell_center(self, cell: Cell) -> np.ndarray:
        return self.origin + (np.array(cell, dtype=float) + 0.5) * self.resolution

    def cell_min_corner(self, cell: Cell) -> np.ndarray:
        return self.origin + np.array(cell, dtype=float) * self.resolution

    def column_support(self, x: int, y: int, z: int) -> Optional[int]:
        """z index of the highest occupied cell strictly below (x, y, z)."""
        lo_z = self.bounds[0][2]
        for zz in range(z - 1, lo_z - 1, -1):
            if (x, y, zz) in self.occupied:
                return zz
        return None

    def top_surface_below(self, p: np.ndarray) -> Optional[float]:
        """World z of the top face of the first occupied cell at or below
        point p's own cell (the point may penetrate the surface slightly)."""
        cell = world_to_discrete_unchecked(p, self)
        lo, hi = self.bounds
        if not (lo[0] <= cell[0] <= hi[0] and lo[1] <= cell[1] <= hi[1]):
            return None
        z = min(cell[2], hi[2])
        for zz in range(z, lo[2] - 1, -1):
            if (cell[0], cell[1], zz) in self.occupied:
                return float(self.origin[2] + (zz + 1) * self.resolution)
        return None


def world_to_discrete(p, vmap: VoxelMap) -> Cell:
    """Floor-discretize a world point to its cell index; raises out of bounds."""
    cell = world_to_discrete_unchecked(p, vmap)
    if not vmap.in_bounds(cell):
        raise OutOfBoundsError(f"point {tuple(np.asarray(p, float))} -> cell {cell} outside bounds {vmap.bounds}")
    return cell


def world_to_discrete_unchecked(p, vmap: VoxelMap) -> Cell:
    q = np.floor((np.asarray(p, dtype=float) - vmap.origin) / vmap.resolution)
    return (int(q[0]), int(q[1]), int(q[2]))


def discrete_to_world(cell: Cell, vmap: VoxelMap) -> np.ndarray:
    """Cell center in world coordinates (inverse of world_to_discrete)."""
    return vmap.cell_center(cell)


def support_distance(cell: Cell, vmap: VoxelMap) -> Optional[int]:
    """Number of free cells strictly below `cell` before the first occupied
    one; None when the whole column below is free."""
    sz = vmap.column_support(cell[0], cell[1], cell[2])
    if sz is None:
        return None
    return cell[2] - sz - 1


@dataclass
class PositionalWeightMap:
    """Sparse additional cell costs, stored in world-length units (meters)."""

    weights: Dict[Cell, float] = field(default_factory=dict)
    log: List[Tuple[int, Cell, float]] = field(default_factory=list)

    def get(self, cell: Cell) -> float:
        return self.weights.get(cell, 0.0)

    def add(self, cell: Cell, delta: float) -> None:
        if delta < 0:
            raise ValueError(f"negative weight delta {delta}")
        self.weights[cell] = self.weights.get(cell, 0.0) + delta
        self.log.append((len(self.log), cell, delta))

    def update_count(self) -> int:
        return len(self.log)

    def reset(self) -> None:
        self.weights.clear()
        self.log.clear()


@dataclass
class ActionWeightMap:
    """Sparse additional action costs keyed by (cell, action), in meters."""

    weights: Dict[Tuple[Cell, ActionT], float] = field(default_factory=dict)
    log: List[Tuple[int, Cell, ActionT, float]] = field(default_factory=list)

    def get(self, cell: Cell, action: ActionT) -> float:
        return self.weights.get((cell, action), 0.0)

    def add(self, cell: Cell, action: ActionT, delta: float) -> None:
        if delta < 0:
            raise ValueError(f"negative weight delta {delta}")
        key = (cell, action)
        self.weights[key] = self.weights.get(key, 0.0) + delta
        self.log.append((len(self.log), cell, action, delta))

    def update_count(self) -> int:
        return len(self.log)

    def reset(self) -> None:
        self.weights.clear()
        self.log.clear()


def add_positional_weight(wmap: PositionalWeightMap, cell: Cell, delta: float) -> PositionalWeightMap:
    wmap.add(cell, delta)
    return wmap


def add_action_weight(wmap: ActionWeightMap, cell: Cell, action: ActionT, delta: float) -> ActionWeightMap:
    wmap.add(cell, action, delta)
    return wmap


# ---------------------------------------------------------------------------
# record-stream exports (consumed by the UI heatmap and by test fixtures)

def export_voxel_records(vmap: VoxelMap) -> str:
    """Header line (JSON) followed by one `x y z tag` line per occupied cell."""
    lo, hi = vmap.bounds
    header = {
        "resolution": vmap.resolution,
        "origin": [float(v) for v in vmap.origin],
        "bounds": [list(lo), list(hi)],
    }
    lines = [json.dumps(header, sort_keys=True)]
    for cell in sorted(vmap.occupied):
        lines.append(f"{cell[0]} {cell[1]} {cell[2]} {vmap.occupied[cell]}")
    return "\n".join(lines) + "\n"


def export_positional_records(wmap: PositionalWeightMap) -> str:
    lines = [f"{c[0]} {c[1]} {c[2]} {w!r}" for c, w in sorted(wmap.weights.items())]
    return "\n".join(lines) + ("\n" if lines else "")


def export_action_records(wmap: ActionWeightMap) -> str:
    lines = [
        f"{c[0]} {c[1]} {c[2]} {a[0]} {a[1]} {a[2]} {w!r}"
        for (c, a), w in sorted(wmap.weights.items())
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def voxel_records_json(vmap: VoxelMap) -> dict:
    """Snapshot of the voxel map as plain JSON-friendly data."""
    lo, hi = vmap.bounds
    return {
        "resolution": vmap.resolution,
        "origin": [float(v) for v in vmap.origin],
        "bounds": [list(lo), list(hi)],
        "cells": [[c[0], c[1], c[2], tag] for c, tag in sorted(vmap.occupied.items())],
    }
