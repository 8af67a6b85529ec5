"""Incremental occupancy mapping, grid path planning, and waypoint extraction.

The map accumulates sensed obstacle points into a sparse voxel set (static
world: cells are never cleared) together with an inflated blocked set used
for planning. Paths come from A* on the 26-connected cell graph with exact
Euclidean edge costs, then line-of-sight shortcutting; the waypoint walks
along the path ahead of the robot.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .geom import as_vec3

_KEY_BIAS = 1 << 20
_KEY_SHIFT = 21
_KEY_MASK = (1 << _KEY_SHIFT) - 1


class NoPath(Exception):
    """Goal unreachable in the current map."""


class StartOccupied(Exception):
    """An obstacle point occupies the start's own cell; no inflation to relax."""


def _pack(ix: int, iy: int, iz: int) -> int:
    return (
        ((ix + _KEY_BIAS) << (2 * _KEY_SHIFT))
        | ((iy + _KEY_BIAS) << _KEY_SHIFT)
        | (iz + _KEY_BIAS)
    )


def _unpack(key: int) -> tuple[int, int, int]:
    return (
        (key >> (2 * _KEY_SHIFT)) - _KEY_BIAS,
        ((key >> _KEY_SHIFT) & _KEY_MASK) - _KEY_BIAS,
        (key & _KEY_MASK) - _KEY_BIAS,
    )


def _dilation_offsets(radius_cells: float) -> np.ndarray:
    """Integer offsets whose cell centers lie within the inflation radius."""
    r = int(np.floor(radius_cells))
    ax = np.arange(-r, r + 1)
    g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    return g[np.einsum("ij,ij->i", g, g) <= radius_cells**2]


@dataclass
class OccupancyGrid:
    """Sparse voxel map with a pre-dilated blocked set for planning."""

    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    cell: float = 0.25
    inflation: float = 0.5
    occupied: set = field(default_factory=set)
    blocked: set = field(default_factory=set)

    def __post_init__(self):
        self.origin = as_vec3(self.origin)
        self._dil = _dilation_offsets(self.inflation / self.cell)

    def cell_of(self, q) -> tuple[int, int, int]:
        idx = np.floor((as_vec3(q) - self.origin) / self.cell).astype(int)
        return int(idx[0]), int(idx[1]), int(idx[2])

    def center_of(self, c: tuple[int, int, int]) -> np.ndarray:
        return self.origin + (np.asarray(c, dtype=float) + 0.5) * self.cell

    def is_blocked(self, c: tuple[int, int, int]) -> bool:
        return _pack(*c) in self.blocked


def update_map(grid: OccupancyGrid, cloud: np.ndarray) -> OccupancyGrid:
    """Mark each cloud point's cell occupied and dilate into the blocked set."""
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return grid
    cells = np.floor((pts - grid.origin) / grid.cell).astype(np.int64)
    keys = (
        ((cells[:, 0] + _KEY_BIAS) << (2 * _KEY_SHIFT))
        | ((cells[:, 1] + _KEY_BIAS) << _KEY_SHIFT)
        | (cells[:, 2] + _KEY_BIAS)
    )
    fresh = [k for k in np.unique(keys).tolist() if k not in grid.occupied]
    if not fresh:
        return grid
    grid.occupied.update(fresh)
    base = np.array([_unpack(k) for k in fresh], dtype=np.int64)
    dil = base[:, None, :] + grid._dil[None, :, :]
    dil = dil.reshape(-1, 3)
    dkeys = (
        ((dil[:, 0] + _KEY_BIAS) << (2 * _KEY_SHIFT))
        | ((dil[:, 1] + _KEY_BIAS) << _KEY_SHIFT)
        | (dil[:, 2] + _KEY_BIAS)
    )
    grid.blocked.update(dkeys.tolist())
    return grid


# 26-connected neighborhood, cached with per-offset Euclidean costs
_OFFSETS = np.array(
    [
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
        if (dx, dy, dz) != (0, 0, 0)
    ],
    dtype=np.int64,
)
_OFFSET_NORMS = np.sqrt(np.einsum("ij,ij->i", _OFFSETS, _OFFSETS))
_PLANAR = _OFFSETS[:, 2] == 0


def _blocked_at(grid: OccupancyGrid, inflation: float) -> set:
    """Blocked set re-dilated at a reduced inflation radius."""
    if inflation >= grid.inflation:
        return grid.blocked
    dil = _dilation_offsets(inflation / grid.cell)
    base = np.array([_unpack(k) for k in grid.occupied], dtype=np.int64)
    if len(base) == 0:
        return set()
    cells = (base[:, None, :] + dil[None, :, :]).reshape(-1, 3)
    keys = (
        ((cells[:, 0] + _KEY_BIAS) << (2 * _KEY_SHIFT))
        | ((cells[:, 1] + _KEY_BIAS) << _KEY_SHIFT)
        | (cells[:, 2] + _KEY_BIAS)
    )
    return set(keys.tolist())


def line_of_sight(grid: OccupancyGrid, a, b, blocked: set | None = None) -> bool:
    """True when the segment a-b crosses no blocked cell (voxel traversal)."""
    if blocked is None:
        blocked = grid.blocked
    a = as_vec3(a)
    b = as_vec3(b)
    ca = np.floor((a - grid.origin) / grid.cell).astype(int)
    cb = np.floor((b - grid.origin) / grid.cell).astype(int)
    if _pack(*ca) in blocked:
        return False
    d = b - a
    step = np.sign(d).astype(int)
    t_max = np.full(3, np.inf)
    t_delta = np.full(3, np.inf)
    for k in range(3):
        if d[k] != 0.0:
            bound = grid.origin[k] + (ca[k] + (step[k] > 0)) * grid.cell
            t_max[k] = (bound - a[k]) / d[k]
            t_delta[k] = grid.cell / abs(d[k])
    cur = ca.copy()
    # advance one axis at a time so shared-face ties visit intermediate cells
    for _ in range(int(np.abs(cb - ca).sum()) + 3):
        if np.array_equal(cur, cb):
            return True
        k = int(np.argmin(t_max))
        if t_max[k] > 1.0 + 1e-12:
            return True
        cur[k] += step[k]
        t_max[k] += t_delta[k]
        if _pack(*cur) in blocked:
            return False
    return True


@dataclass
class Path:
    waypoints: list
    raw_cost: float | None = None

    @property
    def length(self) -> float:
        pts = np.asarray(self.waypoints, dtype=float)
        if len(pts) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())

    @property
    def goal(self) -> np.ndarray:
        return as_vec3(self.waypoints[-1])


def _astar(
    grid: OccupancyGrid,
    blocked: set,
    start_cell: tuple[int, int, int],
    goal_cell: tuple[int, int, int],
    planar: bool = False,
) -> tuple[list[tuple[int, int, int]], float]:
    """Exact shortest 26-connected path between cells.

    The search keeps expanding until the queue's best f exceeds the best goal
    cost, so the returned cost is the true minimum of the float path sums
    (identical to what edge-relaxation Dijkstra computes on the same graph).
    The search domain is the bounding box of the endpoints padded by 25% and
    10 cells; queue exhaustion within it means NoPath.
    """
    sel = _PLANAR if planar else slice(None)
    edges = [
        (int(o[0]), int(o[1]), int(o[2]), float(n) * grid.cell)
        for o, n in zip(_OFFSETS[sel], _OFFSET_NORMS[sel])
    ]

    sx, sy, sz = start_cell
    gx, gy, gz = goal_cell
    pad_x = max(int(abs(gx - sx) * 0.25), 10)
    pad_y = max(int(abs(gy - sy) * 0.25), 10)
    pad_z = max(int(abs(gz - sz) * 0.25), 10)
    lo_x, hi_x = min(sx, gx) - pad_x, max(sx, gx) + pad_x
    lo_y, hi_y = min(sy, gy) - pad_y, max(sy, gy) + pad_y
    lo_z, hi_z = min(sz, gz) - pad_z, max(sz, gz) + pad_z
    if planar:
        lo_z = hi_z = sz

    cell = grid.cell

    def h(cx: int, cy: int, cz: int) -> float:
        dx = (cx - gx) * cell
        dy = (cy - gy) * cell
        dz = (cz - gz) * cell
        return math.sqrt(dx * dx + dy * dy + dz * dz)

    skey = _pack(*start_cell)
    gkey = _pack(*goal_cell)
    g_best: dict[int, float] = {skey: 0.0}
    parent: dict[int, int] = {}
    h0 = h(sx, sy, sz)
    heap: list[tuple[float, float, int, tuple[int, int, int]]] = [
        (h0, h0, skey, start_cell)
    ]
    best_goal = np.inf
    while heap:
        f, _, key, cu = heapq.heappop(heap)
        if f > best_goal * (1.0 + 1e-12):
            break
        gu = g_best[key]
        if key == gkey:
            if gu < best_goal:
                best_goal = gu
            continue
        ux, uy, uz = cu
        for dx, dy, dz, w in edges:
            vx, vy, vz = ux + dx, uy + dy, uz + dz
            if not (lo_x <= vx <= hi_x and lo_y <= vy <= hi_y and lo_z <= vz <= hi_z):
                continue
            vkey = (
                ((vx + _KEY_BIAS) << (2 * _KEY_SHIFT))
                | ((vy + _KEY_BIAS) << _KEY_SHIFT)
                | (vz + _KEY_BIAS)
            )
            if vkey in blocked and vkey != gkey:
                continue
            gv = gu + w
            if gv < g_best.get(vkey, np.inf):
                g_best[vkey] = gv
                parent[vkey] = key
                hv = h(vx, vy, vz)
                heapq.heappush(heap, (gv + hv, hv, vkey, (vx, vy, vz)))
    if not np.isfinite(best_goal):
        raise NoPath("goal unreachable within the search box")
    cells = [goal_cell]
    key = gkey
    while key != skey:
        key = parent[key]
        cells.append(_unpack(key))
    cells.reverse()
    return cells, float(best_goal)


def _shortcut(grid: OccupancyGrid, pts: list, blocked: set) -> list:
    """Greedy farthest-first line-of-sight splicing of a polyline."""
    out = [pts[0]]
    i = 0
    while i < len(pts) - 1:
        j = len(pts) - 1
        while j > i + 1 and not line_of_sight(grid, pts[i], pts[j], blocked):
            j -= 1
        out.append(pts[j])
        i = j
    return out


def plan_path(
    grid: OccupancyGrid,
    start,
    goal,
    robot_radius: float | None = None,
    planar: bool = False,
) -> Path:
    """Shortest safe path from start to goal through the current map.

    The map's blocked set already carries the inflation radius; when the start
    (or goal) cell is swallowed by inflation, the radius is relaxed in 10%
    steps until both endpoints free up. An obstacle point in the start's own
    cell cannot be relaxed away and raises StartOccupied.
    """
    start = as_vec3(start)
    goal = as_vec3(goal)
    s_cell = grid.cell_of(start)
    g_cell = grid.cell_of(goal)
    if _pack(*s_cell) in grid.occupied:
        raise StartOccupied("obstacle point inside the start cell")

    blocked = grid.blocked
    inflation = grid.inflation
    while _pack(*s_cell) in blocked and inflation > grid.cell * 0.25:
        inflation *= 0.9
        blocked = _blocked_at(grid, inflation)
    if _pack(*s_cell) in blocked:
        blocked = blocked - {_pack(*s_cell)}

    if line_of_sight(grid, start, goal, blocked):
        return Path([start.copy(), goal.copy()], raw_cost=None)

    cells, cost = _astar(grid, blocked, s_cell, g_cell, planar=planar)
    pts = [start.copy()] + [grid.center_of(c) for c in cells[1:-1]] + [goal.copy()]
    return Path(_shortcut(grid, pts, blocked), raw_cost=cost)


def select_waypoint(path: Path, p, lookahead: float, grid: OccupancyGrid | None = None) -> np.ndarray:
    """Moving waypoint: the farthest along-path point near p that stays visible.

    Walks the polyline forward from the point nearest to the robot, keeping
    the last sample within `lookahead` of p whose straight segment from p is
    collision-free in the map; within `lookahead` of the goal the goal itself
    is returned.
    """
    p = as_vec3(p)
    pts = np.asarray(path.waypoints, dtype=float).reshape(-1, 3)
    if len(pts) == 1:
        return pts[0].copy()
    if np.linalg.norm(p - pts[-1]) <= lookahead:
        return pts[-1].copy()

    # arc-length position of the closest polyline point to p
    seg = np.diff(pts, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    best_s, best_d = 0.0, np.inf
    acc = 0.0
    for k in range(len(seg)):
        if seg_len[k] < 1e-12:
            acc += seg_len[k]
            continue
        t = np.clip((p - pts[k]) @ seg[k] / seg_len[k] ** 2, 0.0, 1.0)
        d = np.linalg.norm(p - (pts[k] + t * seg[k]))
        if d < best_d:
            best_d, best_s = d, acc + t * seg_len[k]
        acc += seg_len[k]

    step = 0.1
    total = float(seg_len.sum())
    wp = _point_at(pts, seg, seg_len, best_s)
    s = best_s
    while s < total:
        s_next = min(s + step, total)
        cand = _point_at(pts, seg, seg_len, s_next)
        if np.linalg.norm(cand - p) > lookahead:
            break
        if grid is not None and not line_of_sight(grid, p, cand):
            break
        wp, s = cand, s_next
        if s >= total:
            break
    return wp


def _point_at(pts, seg, seg_len, s: float) -> np.ndarray:
    acc = 0.0
    for k in range(len(seg)):
        if s <= acc + seg_len[k] or k == len(seg) - 1:
            t = 0.0 if seg_len[k] < 1e-12 else (s - acc) / seg_len[k]
            return pts[k] + np.clip(t, 0.0, 1.0) * seg[k]
        acc += seg_len[k]
    return pts[-1]
