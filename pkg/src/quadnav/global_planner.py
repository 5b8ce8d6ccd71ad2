"""Grid A* over the 26-connected voxel grid.

Cell validity combines occupancy with the standing-height rule: a cell is
traversable when it is free and its support surface lies no more than
floor(h_th / resolution) cells below.  Action weights add to the edge
costs; positional weights are charged on arrival at a cell, which makes a
weighted cell repel every route through it rather than just reordering the
search.  Both weights are stored in meters and divided by the resolution so
they add to cell-unit distances.

The total path cost is therefore sum(action_cost) plus the positional
weights of the visited cells, the Euclidean goal-distance term of the
priority stays admissible and consistent, and the search is plain
closed-set A*: first goal expansion is optimal under that metric, and with
all weights zero it expands no more nodes than Dijkstra.  Ties break on
(f, h, cell index order) so expansion counts are reproducible.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from .maps import (
    ACTIONS,
    ACTION_NORMS,
    ActionT,
    ActionWeightMap,
    Cell,
    PositionalWeightMap,
    VoxelMap,
    support_distance,
)


class PlanningError(RuntimeError):
    pass


class InvalidEndpointError(PlanningError):
    pass


class NoPathError(PlanningError):
    pass


@dataclass
class GlobalPath:
    states: List[Cell]
    total_cost: float
    expansions: int


def h_th_cells(h_th: float, resolution: float) -> int:
    """Standing-height threshold in whole cells (floor: conservative)."""
    return int(math.floor(h_th / resolution))


def valid_discrete_state(cell: Cell, vmap: VoxelMap, h_th: float) -> bool:
    """True iff the cell is free and its support is within standing reach."""
    if not vmap.in_bounds(cell) or vmap.is_occupied(cell):
        return False
    sd = support_distance(cell, vmap)
    return sd is not None and sd <= h_th_cells(h_th, vmap.resolution)


class GridValidator:
    """Memoized validity lookups, reusable across replans on one map."""

    def __init__(self, vmap: VoxelMap, h_th: float):
        self.vmap = vmap
        self.max_support = h_th_cells(h_th, vmap.resolution)
        self._cache: Dict[Cell, bool] = {}

    def __call__(self, cell: Cell) -> bool:
        hit = self._cache.get(cell)
        if hit is not None:
            return hit
        vmap = self.vmap
        ok = vmap.in_bounds(cell) and not vmap.is_occupied(cell)
        if ok:
            sd = support_distance(cell, vmap)
            ok = sd is not None and sd <= self.max_support
        self._cache[cell] = ok
        return ok


def heuristic(q: Cell, g: Cell, weights: PositionalWeightMap, resolution: float) -> float:
    base = math.sqrt((g[0] - q[0]) ** 2 + (g[1] - q[1]) ** 2 + (g[2] - q[2]) ** 2)
    return base + weights.get(q) / resolution


def action_cost(a: ActionT, q: Cell, weights: ActionWeightMap, resolution: float) -> float:
    return ACTION_NORMS[a] + weights.get(q, a) / resolution


def plan(
    start: Cell,
    goal: Cell,
    vmap: VoxelMap,
    pos_weights: PositionalWeightMap,
    act_weights: ActionWeightMap,
    h_th: float,
    validator: Optional[GridValidator] = None,
) -> GlobalPath:
    """A* from start to goal; raises InvalidEndpointError / NoPathError."""
    if validator is None:
        validator = GridValidator(vmap, h_th)
    if not validator(start):
        raise InvalidEndpointError(f"start cell {start} is not a valid state")
    if not validator(goal):
        raise InvalidEndpointError(f"goal cell {goal} is not a valid state")

    res = vmap.resolution
    pw = pos_weights.weights
    aw = act_weights.weights
    have_pw = bool(pw)
    have_aw = bool(aw)
    sqrt = math.sqrt
    inf = math.inf
    heappush, heappop = heapq.heappush, heapq.heappop
    moves = [(a, ACTION_NORMS[a]) for a in ACTIONS]
    gx, gy, gz = goal
    valid = validator
    vcache = validator._cache

    h0 = sqrt((gx - start[0]) ** 2 + (gy - start[1]) ** 2 + (gz - start[2]) ** 2)
    g_best: Dict[Cell, float] = {start: 0.0}
    closed: Dict[Cell, bool] = {}
    parent: Dict[Cell, Tuple[Cell, ActionT]] = {}
    open_heap: List[Tuple[float, float, Cell, float]] = [(h0, h0, start, 0.0)]
    expansions = 0

    goal_cost: Optional[float] = None
    while open_heap:
        f, h, cell, g = heappop(open_heap)
        if cell in closed or g != g_best.get(cell):
            continue
        closed[cell] = True
        expansions += 1
        if cell == goal:
            goal_cost = g
            break
        cx, cy, cz = cell
        for a, base in moves:
            nb = (cx + a[0], cy + a[1], cz + a[2])
            if nb in closed:
                continue
            ok = vcache.get(nb)
            if ok is None:
                ok = valid(nb)
            if not ok:
                continue
            ng = g + base
            if have_aw:
                ng += aw.get((cell, a), 0.0) / res
            if have_pw:
                ng += pw.get(nb, 0.0) / res
            if ng < g_best.get(nb, inf):
                g_best[nb] = ng
                parent[nb] = (cell, a)
                hb = sqrt((gx - nb[0]) ** 2 + (gy - nb[1]) ** 2 + (gz - nb[2]) ** 2)
                heappush(open_heap, (ng + hb, hb, nb, ng))

    if goal_cost is None:
        raise NoPathError(f"goal {goal} unreachable from {start}")
    cells = [goal]
    while cells[-1] != start:
        cells.append(parent[cells[-1]][0])
    cells.reverse()
    return GlobalPath(states=cells, total_cost=goal_cost, expansions=expansions)
