"""Collision-free shortest paths on the occupancy grid (8-connected A* with
octile heuristic, obstacle inflation, string-pulling smoothing) and
compilation of geometric paths into executable action sequences."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Point2
from .world import (
    Action,
    DEFAULT_FORWARD_STEP,
    DEFAULT_TURN_STEP,
    Pose,
    WorldSpec,
    forward,
    stop,
    turn_left,
    turn_right,
    wrap_angle,
)

SQRT2 = math.sqrt(2.0)


class NoPathError(RuntimeError):
    """Goal unreachable from start on the planning grid."""


@dataclass(frozen=True)
class PlannedPath:
    """Smoothed waypoint polyline plus the raw grid path it came from.

    ``cell_cost`` is the pre-smoothing A* cost in cell units (1 per
    orthogonal move, sqrt(2) per diagonal).
    """

    waypoints: tuple
    length: float
    cell_path: tuple = ()
    cell_cost: float = 0.0


def _polyline_length(points) -> float:
    total = 0.0
    for a, b in zip(points, points[1:]):
        total += a.distance_to(b)
    return total


def inflate_grid(grid: np.ndarray) -> np.ndarray:
    """Dilate occupancy by one cell (8-neighborhood)."""
    out = grid.copy()
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            shifted = np.zeros_like(grid)
            src = grid[
                max(0, -dr) : grid.shape[0] - max(0, dr),
                max(0, -dc) : grid.shape[1] - max(0, dc),
            ]
            shifted[
                max(0, dr) : grid.shape[0] - max(0, -dr),
                max(0, dc) : grid.shape[1] - max(0, -dc),
            ] = src
            out |= shifted
    return out


def planning_grid(world: WorldSpec, *cells) -> np.ndarray:
    """Inflated occupancy with the given cells carved free (start/goal
    cells must stay usable even when inflation swallows them)."""
    grid = inflate_grid(world.grid)
    for r, c in cells:
        if not world.grid[r, c]:
            grid[r, c] = False
    return grid


def _octile(a, b) -> float:
    dr, dc = abs(a[0] - b[0]), abs(a[1] - b[1])
    return max(dr, dc) + (SQRT2 - 1.0) * min(dr, dc)


def _neighbors(grid: np.ndarray, cell):
    rows, cols = grid.shape
    r, c = cell
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            nr, nc = r + dr, c + dc
            if not (0 <= nr < rows and 0 <= nc < cols) or grid[nr, nc]:
                continue
            if dr != 0 and dc != 0:
                # no corner cutting
                if grid[r, nc] or grid[nr, c]:
                    continue
                yield (nr, nc), SQRT2
            else:
                yield (nr, nc), 1.0


def astar_cells(grid: np.ndarray, start, goal):
    """A* over grid cells; returns (cost, cell path) or raises NoPathError."""
    if grid[start] or grid[goal]:
        raise NoPathError(f"start {start} or goal {goal} blocked on planning grid")
    open_heap = [(_octile(start, goal), 0.0, start)]
    g_cost = {start: 0.0}
    came_from = {}
    closed = set()
    while open_heap:
        _, g, cell = heapq.heappop(open_heap)
        if cell in closed:
            continue
        closed.add(cell)
        if cell == goal:
            path = [cell]
            while cell in came_from:
                cell = came_from[cell]
                path.append(cell)
            path.reverse()
            return g, path
        for nxt, move_cost in _neighbors(grid, cell):
            ng = g + move_cost
            if ng < g_cost.get(nxt, math.inf):
                g_cost[nxt] = ng
                came_from[nxt] = cell
                heapq.heappush(open_heap, (ng + _octile(nxt, goal), ng, nxt))
    raise NoPathError(f"no path from {start} to {goal}")


def _smooth(points: list, grid: np.ndarray, world: WorldSpec) -> list:
    """String pulling: drop intermediate waypoints while line of sight holds
    on the (inflated) planning grid."""
    check_world = WorldSpec(grid=grid, cell_size=world.cell_size, landmarks=())
    out = [points[0]]
    i = 0
    while i < len(points) - 1:
        j = len(points) - 1
        while j > i + 1 and not check_world.segment_clear(points[i], points[j]):
            j -= 1
        out.append(points[j])
        i = j
    return out


def plan(start: Point2, goal: Point2, world: WorldSpec) -> PlannedPath:
    """Shortest collision-free path from start to goal."""
    if not world.is_free(start):
        raise NoPathError(f"start ({start.x}, {start.y}) not in free space")
    if not world.is_free(goal):
        raise NoPathError(f"goal ({goal.x}, {goal.y}) not in free space")
    start_cell = world.cell_of(start)
    goal_cell = world.cell_of(goal)
    if start_cell == goal_cell:
        points = [start] if start == goal else [start, goal]
        return PlannedPath(
            waypoints=tuple(points),
            length=_polyline_length(points),
            cell_path=(start_cell,),
            cell_cost=0.0,
        )
    grid = planning_grid(world, start_cell, goal_cell)
    try:
        cost, cells = astar_cells(grid, start_cell, goal_cell)
    except NoPathError:
        # inflation can seal narrow corridors; fall back to the raw grid
        grid = world.grid
        cost, cells = astar_cells(grid, start_cell, goal_cell)
    points = [start] + [world.cell_center(r, c) for r, c in cells[1:-1]] + [goal]
    smoothed = _smooth(points, grid, world)
    return PlannedPath(
        waypoints=tuple(smoothed),
        length=_polyline_length(smoothed),
        cell_path=tuple(cells),
        cell_cost=cost,
    )


def plan_through(points: list, world: WorldSpec) -> PlannedPath:
    """Concatenated pairwise plans visiting every input point in order."""
    if len(points) < 2:
        raise NoPathError("plan_through needs at least two points")
    waypoints = [points[0]]
    total_cost = 0.0
    cell_path = []
    for leg, (a, b) in enumerate(zip(points, points[1:])):
        try:
            sub = plan(a, b, world)
        except NoPathError as exc:
            raise NoPathError(f"leg {leg} ({a.x},{a.y})->({b.x},{b.y}): {exc}") from exc
        waypoints.extend(sub.waypoints[1:])
        total_cost += sub.cell_cost
        cell_path.extend(sub.cell_path if not cell_path else sub.cell_path[1:])
    return PlannedPath(
        waypoints=tuple(waypoints),
        length=_polyline_length(waypoints),
        cell_path=tuple(cell_path),
        cell_cost=total_cost,
    )


def _clear_forwards(world: WorldSpec, pos: Point2, heading: float, n: int, step: float) -> list:
    """Positions reached by up to ``n`` unobstructed forward steps."""
    out = []
    p = pos
    for _ in range(n):
        nxt = Point2(p.x + step * math.cos(heading), p.y + step * math.sin(heading))
        if not world.in_bounds(nxt) or not world.segment_clear(p, nxt):
            break
        out.append(nxt)
        p = nxt
    return out


def path_to_actions(
    path: PlannedPath,
    start_pose: Pose,
    forward_step: float = DEFAULT_FORWARD_STEP,
    turn_step: float = DEFAULT_TURN_STEP,
    world: WorldSpec | None = None,
) -> list:
    """Compile a waypoint path into quantized turn/forward actions ending in
    STOP; re-aims after every forward burst so quantization error does not
    accumulate across waypoints.

    With ``world`` given, forwards are checked against the grid and a
    blocked burst falls back to the nearest clear quantized heading, so
    the compiled sequence replays collision-free."""
    actions: list[Action] = []
    pos = start_pose.position
    heading = start_pose.heading
    tol = forward_step * 0.6
    max_burst = max(1, int(2.0 / forward_step))
    if world is not None and len(path.cell_path) >= 2:
        # follow the raw cell path: short legs, clear by construction, no
        # smoothed segment grazing through one-cell passages
        targets = [world.cell_center(r, c) for r, c in path.cell_path[1:]]
        targets.append(path.waypoints[-1])
    else:
        targets = list(path.waypoints[1:]) if len(path.waypoints) > 1 else []
    for wp in targets:
        for _ in range(200):  # convergence guard
            dist = pos.distance_to(wp)
            if dist <= tol:
                break
            desired = math.atan2(wp.y - pos.y, wp.x - pos.x)
            q = round(wrap_angle(desired - heading) / turn_step)
            # re-aim at least every 2 m so heading quantization drift stays small
            n_fwd = min(max(1, round(dist / forward_step)), max_burst)
            if world is None:
                candidates = [q]
            else:
                candidates = [q, q + 1, q - 1, q + 2, q - 2, q + 3, q - 3]
            moved = False
            for cand in candidates:
                h = (heading + cand * turn_step) % (2 * math.pi)
                if world is None:
                    reached = [
                        Point2(
                            pos.x + i * forward_step * math.cos(h),
                            pos.y + i * forward_step * math.sin(h),
                        )
                        for i in range(1, n_fwd + 1)
                    ]
                else:
                    reached = _clear_forwards(world, pos, h, n_fwd, forward_step)
                if not reached:
                    continue
                if cand > 0:
                    actions.extend(turn_left(turn_step) for _ in range(cand))
                elif cand < 0:
                    actions.extend(turn_right(turn_step) for _ in range(-cand))
                heading = h
                actions.extend(forward(forward_step) for _ in range(len(reached)))
                pos = reached[-1]
                moved = True
                break
            if not moved:
                break  # boxed in; let the next waypoint (or STOP) take over
    actions.append(stop())
    return actions
