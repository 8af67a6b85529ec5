"""Lockstep multi-agent world: obstacle fields, anisotropic sensing, agent
stepping, metrics, traversability estimation, and scenario generators.

Every control tick runs all agent pipelines against the same frozen world
snapshot, then physics integrates everyone at the inner rate with held inputs.
All randomness flows from one seeded generator through named substreams, so a
(config, seed) pair reproduces byte-identical reports regardless of where or
how often it runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ctl import (
    InfeasibleStart,
    MpcConfig,
    RobotState,
    desired_heading,
    gate_prefix,
    solve_mpc,
)
from .geom import FovSpec, as_vec3, fov_contains, fov_mask
from .lloyd import InfeasibleCell, RuleParams, RuleState, TickView, pipeline_tick
from .plan import (
    NoPath,
    OccupancyGrid,
    StartOccupied,
    line_of_sight,
    plan_path,
    select_waypoint,
    update_map,
)

SCENARIOS = ("circle", "circle_obstacles", "forest", "custom")

# named FoV presets used across the experiment suite
FOV_PRESETS = {
    "lim": (180.0, 59.0, -20.0),
    "half": (180.0, 180.0, -90.0),
    "full": (180.0, 360.0, 0.0),
    "2d": (360.0, 0.0, 0.0),
}


class ConfigError(Exception):
    """Invalid configuration; the message names the offending field."""


class NoFreeSpace(Exception):
    """Start sampling kept landing inside obstacles."""


# --- obstacles -----------------------------------------------------------------


@dataclass
class Cylinder:
    center: np.ndarray  # xy
    radius: float
    z_range: tuple

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(2)
        self.z_range = (float(self.z_range[0]), float(self.z_range[1]))


@dataclass
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = as_vec3(self.center)


def _sample_cylinder(c: Cylinder, spacing: float) -> np.ndarray:
    n_az = max(int(math.ceil(2.0 * math.pi * c.radius / spacing)), 8)
    z0, z1 = c.z_range
    n_z = max(int(math.ceil((z1 - z0) / spacing)) + 1, 2)
    az = np.arange(n_az) * (2.0 * math.pi / n_az)
    zs = np.linspace(z0, z1, n_z)
    ring = np.column_stack([c.center[0] + c.radius * np.cos(az), c.center[1] + c.radius * np.sin(az)])
    pts = np.empty((n_az * n_z, 3))
    pts[:, :2] = np.repeat(ring, n_z, axis=0)
    pts[:, 2] = np.tile(zs, n_az)
    return pts


def _sample_sphere(s: Sphere, spacing: float) -> np.ndarray:
    n_el = max(int(math.ceil(math.pi * s.radius / spacing)) + 1, 3)
    els = np.linspace(-math.pi / 2.0, math.pi / 2.0, n_el)
    out = []
    for el in els:
        r_ring = s.radius * math.cos(el)
        n_az = max(int(math.ceil(2.0 * math.pi * r_ring / spacing)), 1)
        az = np.arange(n_az) * (2.0 * math.pi / n_az)
        ring = np.column_stack(
            [
                s.center[0] + r_ring * np.cos(az),
                s.center[1] + r_ring * np.sin(az),
                np.full(n_az, s.center[2] + s.radius * math.sin(el)),
            ]
        )
        out.append(ring)
    return np.vstack(out)


def obstacle_distances(world: "World", pts: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest obstacle surface (negative inside)."""
    pts = np.atleast_2d(pts)
    d = np.full(len(pts), np.inf)
    for c in world.cylinders:
        dr = np.hypot(pts[:, 0] - c.center[0], pts[:, 1] - c.center[1]) - c.radius
        dz = np.maximum(c.z_range[0] - pts[:, 2], pts[:, 2] - c.z_range[1])
        inside = (dr <= 0) & (dz <= 0)
        dist = np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))
        dist[inside] = np.maximum(dr, dz)[inside]
        d = np.minimum(d, dist)
    for s in world.spheres:
        d = np.minimum(d, np.linalg.norm(pts - s.center, axis=1) - s.radius)
    return d


# --- world ---------------------------------------------------------------------


@dataclass
class SimParams:
    dt_physics: float = 0.01
    dt_ctl: float = 0.1
    t_max: float = 120.0
    d_goal: float = 1.0
    t_replan: float = 0.5
    lookahead: float = 4.0
    r_s: float = 5.0
    resolution: float = 0.25
    sensing_spacing: float = 0.1
    epsilon_sep: float = 0.5
    sigma_obs: float = 0.0
    occlusion: bool = False
    track_timeout: float = 0.5
    rule: RuleParams = field(default_factory=RuleParams)
    mpc: MpcConfig = field(default_factory=MpcConfig)


@dataclass
class Agent:
    state: RobotState
    rule: RuleState
    grid: OccupancyGrid
    goal: np.ndarray
    delta: float
    fov: FovSpec
    planar: bool = False  # true 2D mode: z frozen
    route_planar: bool = False  # plan level routes (sensor cannot look up)
    path: object = None
    last_plan: float = -np.inf
    second_seed: np.ndarray | None = None
    tracks: list = field(default_factory=list)  # [position, radius, last_seen]
    u: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw_rate_cmd: float = 0.0
    frozen: bool = False
    acc_ok: bool = True
    conv_t: float = math.nan
    d_min: float = math.inf
    do_min: float = math.inf
    pair_margin: float = math.inf
    v_max_seen: float = 0.0

    def __post_init__(self):
        self.goal = as_vec3(self.goal)


@dataclass
class SensorSnapshot:
    points: np.ndarray
    neighbors: list  # (position, radius) pairs
    t: float


@dataclass
class World:
    arena_lo: np.ndarray
    arena_hi: np.ndarray
    cylinders: list
    spheres: list
    agents: list
    params: SimParams
    seed: int = 0
    time: float = 0.0
    arena_disk: tuple | None = None  # (cx, cy, R) overrides the box boundary
    cloud: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    rng_noise: np.random.Generator | None = None

    def __post_init__(self):
        self.arena_lo = as_vec3(self.arena_lo)
        self.arena_hi = as_vec3(self.arena_hi)
        self._substep = 0
        self._n_sub = max(int(round(self.params.dt_ctl / self.params.dt_physics)), 1)
        self._slice_cache: dict = {}
        if len(self.cloud) == 0 and (self.cylinders or self.spheres):
            parts = [_sample_cylinder(c, self.params.sensing_spacing) for c in self.cylinders]
            parts += [_sample_sphere(s, self.params.sensing_spacing) for s in self.spheres]
            self.cloud = np.vstack(parts)


def _slice_cloud(world: World, alt: float) -> np.ndarray:
    """Exact-altitude ring samples for the planar (2D) sensing mode."""
    hit = world._slice_cache.get(alt)
    if hit is not None:
        return hit
    spacing = world.params.sensing_spacing
    out = []
    for c in world.cylinders:
        if c.z_range[0] <= alt <= c.z_range[1]:
            n = max(int(math.ceil(2.0 * math.pi * c.radius / spacing)), 8)
            az = np.arange(n) * (2.0 * math.pi / n)
            out.append(
                np.column_stack(
                    [
                        c.center[0] + c.radius * np.cos(az),
                        c.center[1] + c.radius * np.sin(az),
                        np.full(n, alt),
                    ]
                )
            )
    for s in world.spheres:
        dz = alt - s.center[2]
        if abs(dz) < s.radius:
            r = math.sqrt(s.radius**2 - dz * dz)
            n = max(int(math.ceil(2.0 * math.pi * r / spacing)), 8)
            az = np.arange(n) * (2.0 * math.pi / n)
            out.append(
                np.column_stack(
                    [
                        s.center[0] + r * np.cos(az),
                        s.center[1] + r * np.sin(az),
                        np.full(n, alt),
                    ]
                )
            )
    pts = np.vstack(out) if out else np.empty((0, 3))
    world._slice_cache[alt] = pts
    return pts


def _first_hit(world: World, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Distance along each unit ray to the first obstacle surface (inf if none)."""
    t_hit = np.full(len(dirs), np.inf)
    ox, oy, oz = origin
    for c in world.cylinders:
        dx, dy = dirs[:, 0], dirs[:, 1]
        fx, fy = ox - c.center[0], oy - c.center[1]
        a = dx * dx + dy * dy
        b = fx * dx + fy * dy
        cc = fx * fx + fy * fy - c.radius**2
        disc = b * b - a * cc
        ok = (disc >= 0) & (a > 1e-12)
        sq = np.sqrt(np.maximum(disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (-b - sq) / a
            t1 = (-b + sq) / a
        t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        z_at = oz + dirs[:, 2] * t
        ok &= (t < np.inf) & (z_at >= c.z_range[0]) & (z_at <= c.z_range[1])
        t_hit = np.where(ok & (t < t_hit), t, t_hit)
    for s in world.spheres:
        f = origin - s.center
        b = dirs @ f
        cc = f @ f - s.radius**2
        disc = b * b - cc
        ok = disc >= 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        t_hit = np.where(ok & (t < t_hit), t, t_hit)
    return t_hit


def sense(world: World, idx: int) -> SensorSnapshot:
    """FoV- and range-filtered obstacle cloud plus neighbor observations."""
    ag = world.agents[idx]
    p = ag.state.p
    yaw = ag.state.yaw
    heading = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    r_s = world.params.r_s

    pts = _slice_cloud(world, p[2]) if ag.fov.planar else world.cloud
    if len(pts):
        d2 = np.einsum("ij,ij->i", pts - p, pts - p)
        pts = pts[d2 <= r_s * r_s]
    if len(pts):
        pts = pts[fov_mask(ag.fov, p, heading, pts)]
    if len(pts) and world.params.occlusion:
        rel = pts - p
        dist = np.linalg.norm(rel, axis=1)
        safe = dist > 1e-9
        dirs = np.where(safe[:, None], rel / np.maximum(dist, 1e-9)[:, None], 0.0)
        t_hit = _first_hit(world, p, dirs)
        keep = dist <= t_hit + 1.5 * world.params.sensing_spacing
        pts = pts[keep | ~safe]

    neighbors = []
    for j, other in enumerate(world.agents):
        if j == idx:
            continue
        q = other.state.p
        if np.linalg.norm(q - p) > r_s:
            continue
        if not fov_contains(ag.fov, p, heading, q):
            continue
        obs = q.copy()
        if world.params.sigma_obs > 0.0 and world.rng_noise is not None:
            obs = obs + world.rng_noise.normal(0.0, world.params.sigma_obs, 3)
        neighbors.append((obs, other.delta))
    return SensorSnapshot(points=pts, neighbors=neighbors, t=world.time)


def _path_still_clear(agent: Agent, p: np.ndarray) -> bool:
    if agent.path is None:
        return False
    pts = [p] + [np.asarray(w, dtype=float) for w in agent.path.waypoints]
    for a, b in zip(pts[:-1], pts[1:]):
        if not line_of_sight(agent.grid, a, b):
            return False
    return True


def _update_tracks(ag: Agent, detections, now: float, timeout: float) -> list:
    """Short-memory neighbor tracker bridging sensor-span flicker.

    A neighbor sitting exactly on the span edge is detected only on alternate
    ticks; a memoryless cell construction then drops and re-adds its half-space
    at the flicker rate and the robot keeps creeping in during the gaps. Real
    stacks fuse detections through a filter, so estimates persist briefly.
    Detections are matched greedily to the nearest live track; unmatched ones
    open new tracks, unseen tracks coast at their last observed position and
    expire after the timeout.
    """
    if timeout <= 0.0:
        return list(detections)
    used = set()
    for q, r in detections:
        best, best_d = None, 0.75  # > max relative travel per control tick
        for t_idx, tr in enumerate(ag.tracks):
            if t_idx in used:
                continue
            d = float(np.linalg.norm(q - tr[0]))
            if d < best_d:
                best, best_d = t_idx, d
        if best is None:
            ag.tracks.append([np.asarray(q, dtype=float), float(r), now])
            used.add(len(ag.tracks) - 1)
        else:
            ag.tracks[best] = [np.asarray(q, dtype=float), float(r), now]
            used.add(best)
    ag.tracks = [tr for tr in ag.tracks if now - tr[2] <= timeout + 1e-9]
    return [(tr[0], tr[1]) for tr in ag.tracks]


def _control_tick(world: World) -> None:
    prm = world.params
    for i, ag in enumerate(world.agents):
        if ag.frozen:
            ag.u[:] = 0.0
            ag.yaw_rate_cmd = 0.0
            continue
        snap = sense(world, i)
        neighbors = _update_tracks(ag, snap.neighbors, world.time, prm.track_timeout)
        update_map(ag.grid, snap.points)
        p = ag.state.p
        yaw = ag.state.yaw
        heading = np.array([math.cos(yaw), math.sin(yaw), 0.0])

        if ag.path is None or world.time - ag.last_plan >= prm.t_replan - 1e-9:
            # monotone map: a still-clear old path keeps its exact optimality
            if not _path_still_clear(ag, p):
                try:
                    ag.path = plan_path(ag.grid, p, ag.goal, planar=ag.route_planar)
                except (NoPath, StartOccupied):
                    pass  # hold the stale path (or none); retry next trigger
            ag.last_plan = world.time

        if ag.path is not None:
            wp = select_waypoint(ag.path, p, prm.lookahead, ag.grid)
        else:
            wp = p.copy()

        view = TickView(
            position=p,
            heading=heading,
            r_s=prm.r_s,
            resolution=prm.resolution,
            delta=ag.delta,
            neighbors=neighbors,
            cloud=snap.points,
            fov=ag.fov,
            wp=wp,
            second_seed=ag.second_seed,
            epsilon_sep=prm.epsilon_sep,
        )
        try:
            res = pipeline_tick(view, ag.rule, prm.rule, prm.dt_ctl)
        except InfeasibleCell:
            ref, yaw_ref = p.copy(), yaw  # hold and retry next tick
        else:
            ag.rule = res.state
            ag.second_seed = res.proj_W
            yaw_ref = desired_heading(res.c_B, p, yaw)
            # hold position over the horizon prefix that still faces away,
            # track the projected centroid once the predicted yaw clears
            m = gate_prefix(p, res.c_B, yaw, ag.fov.f_x, prm.mpc)
            if m == 0:
                ref = res.proj_W
            elif m >= prm.mpc.horizon:
                ref = p.copy()
            else:
                ref = np.vstack(
                    [np.tile(p, (m, 1)), np.tile(res.proj_W, (prm.mpc.horizon - m, 1))]
                )

        try:
            sol = solve_mpc(ag.state, ref, yaw_ref, prm.mpc)
        except InfeasibleStart:
            ag.acc_ok = False
            ag.frozen = True
            ag.state.v[:] = 0.0
            ag.state.a[:] = 0.0
            ag.u[:] = 0.0
            ag.yaw_rate_cmd = 0.0
            continue
        ag.u = sol.inputs[0].copy()
        if ag.planar:
            ag.u[2] = 0.0
        ag.yaw_rate_cmd = sol.yaw_rate


def step(world: World, dt_physics: float | None = None) -> World:
    """Advance one physics substep; control fires on dt_ctl boundaries."""
    prm = world.params
    dt = prm.dt_physics if dt_physics is None else float(dt_physics)
    if world._substep % world._n_sub == 0:
        _control_tick(world)
    for ag in world.agents:
        if ag.frozen:
            continue
        st = ag.state
        st.p += st.v * dt + 0.5 * st.a * dt * dt
        st.v += st.a * dt
        st.a += ag.u * dt
        st.yaw = math.atan2(
            math.sin(st.yaw + ag.yaw_rate_cmd * dt), math.cos(st.yaw + ag.yaw_rate_cmd * dt)
        )
        st.yaw_rate = ag.yaw_rate_cmd
    world.time += dt
    world._substep += 1
    _record_sample(world)
    return world


def _record_sample(world: World) -> None:
    agents = world.agents
    n = len(agents)
    if n == 0:
        return
    prm = world.params
    P = np.array([ag.state.p for ag in agents])
    V = np.array([ag.state.v for ag in agents])
    A = np.array([ag.state.a for ag in agents])
    G = np.array([ag.goal for ag in agents])
    if world.cylinders or world.spheres:
        od = obstacle_distances(world, P)
    else:
        od = np.full(n, np.inf)
    sp = np.sqrt(np.einsum("ij,ij->i", V, V))
    acc_bad = np.any(np.abs(A) > prm.mpc.a_max + 1e-6, axis=1)
    close = np.linalg.norm(P - G, axis=1) <= prm.d_goal
    if n >= 2:
        diff = P[:, None, :] - P[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        np.fill_diagonal(dist, np.inf)
        deltas = np.array([ag.delta for ag in agents])
        margin = dist - (deltas[:, None] + deltas[None, :])
        np.fill_diagonal(margin, np.inf)
        dmin_i = dist.min(axis=1)
        marg_i = margin.min(axis=1)
    else:
        dmin_i = marg_i = np.full(n, np.inf)
    for i, ag in enumerate(agents):
        ag.do_min = min(ag.do_min, float(od[i]))
        if sp[i] > ag.v_max_seen:
            ag.v_max_seen = float(sp[i])
        if acc_bad[i]:
            ag.acc_ok = False
        # t is the first entry of the final uninterrupted stay within d_goal
        if close[i]:
            if math.isnan(ag.conv_t):
                ag.conv_t = world.time
        elif not ag.frozen:
            ag.conv_t = math.nan
        ag.d_min = min(ag.d_min, float(dmin_i[i]))
        ag.pair_margin = min(ag.pair_margin, float(marg_i[i]))
        if (od[i] < ag.delta or marg_i[i] < 0.0) and not ag.frozen:
            _freeze(ag)


def _freeze(ag: Agent) -> None:
    if not ag.frozen:
        ag.frozen = True
        ag.state.v[:] = 0.0
        ag.state.a[:] = 0.0
        ag.u[:] = 0.0
        ag.yaw_rate_cmd = 0.0


# --- traversability --------------------------------------------------------------


def _slice_radii(world: World, z: float, probe: float) -> list:
    """Effective (center_xy, radius) footprints of obstacles cut at height z.

    The probe is a flat horizontal disk, so a cylinder counts only inside its
    z band and a sphere only where the z plane actually cuts it; the probe
    radius is added to the cut radius.
    """
    out = []
    for c in world.cylinders:
        if c.z_range[0] <= z <= c.z_range[1]:
            out.append((c.center.copy(), c.radius + probe))
    for s in world.spheres:
        dz = z - s.center[2]
        if abs(dz) < s.radius:
            out.append((s.center[:2].copy(), math.sqrt(s.radius**2 - dz * dz) + probe))
    return out


def traversability(
    world: World,
    n: int,
    line_cap: float = math.inf,
    rng: np.random.Generator | None = None,
    fixed_start: np.ndarray | None = None,
    probe_radius: float | None = None,
) -> float:
    """Mean free straight-line travel before the probe disk hits anything.

    Starts are sampled uniformly over the arena footprint at the arena's mid
    height, rejecting starts whose probe disk already overlaps an obstacle;
    directions are uniform on the horizontal circle. A trial ends where the
    probe disk touches an obstacle, where its center crosses the arena
    boundary, or at line_cap. fixed_start pins every trial's start (the
    degenerate calibration mode: from the center of an empty disk arena the
    mean equals the disk radius exactly).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    probe = probe_radius
    if probe is None:
        probe = max((ag.delta for ag in world.agents), default=0.0)
    zc = 0.5 * (world.arena_lo[2] + world.arena_hi[2])
    footprint = _slice_radii(world, zc, probe)

    starts = np.empty((n, 3))
    if fixed_start is not None:
        starts[:] = as_vec3(fixed_start)
        zc = float(starts[0, 2])
        footprint = _slice_radii(world, zc, probe)
    else:
        filled = 0
        rejected = 0
        while filled < n:
            m = min(4096, max(n - filled, 256))
            if world.arena_disk is not None:
                cx, cy, radius = world.arena_disk
                rr = radius * np.sqrt(rng.random(m))
                th = rng.random(m) * 2.0 * math.pi
                cand = np.column_stack(
                    [cx + rr * np.cos(th), cy + rr * np.sin(th), np.full(m, zc)]
                )
            else:
                cand = np.column_stack(
                    [
                        rng.uniform(world.arena_lo[0], world.arena_hi[0], m),
                        rng.uniform(world.arena_lo[1], world.arena_hi[1], m),
                        np.full(m, zc),
                    ]
                )
            free = np.ones(m, dtype=bool)
            for cen, reff in footprint:
                free &= np.hypot(cand[:, 0] - cen[0], cand[:, 1] - cen[1]) > reff
            good = cand[free]
            take = min(len(good), n - filled)
            starts[filled : filled + take] = good[:take]
            filled += take
            rejected += m - len(good)
            if rejected > 10_000 and filled == 0:
                raise NoFreeSpace("10^4 start rejections without a free sample")

    theta = rng.random(n) * 2.0 * math.pi
    dirs = np.column_stack([np.cos(theta), np.sin(theta)])

    d_l = np.full(n, float(line_cap))
    # arena boundary: where the probe center exits the footprint
    if world.arena_disk is not None:
        cx, cy, radius = world.arena_disk
        fx = starts[:, 0] - cx
        fy = starts[:, 1] - cy
        b = fx * dirs[:, 0] + fy * dirs[:, 1]
        c0 = fx * fx + fy * fy - radius * radius
        t_b = -b + np.sqrt(np.maximum(b * b - c0, 0.0))
        d_l = np.minimum(d_l, t_b)
    else:
        for k in (0, 1):
            dk = dirs[:, k]
            with np.errstate(divide="ignore"):
                t_hi = np.where(dk > 1e-12, (world.arena_hi[k] - starts[:, k]) / dk, np.inf)
                t_lo = np.where(dk < -1e-12, (world.arena_lo[k] - starts[:, k]) / dk, np.inf)
            d_l = np.minimum(d_l, np.minimum(t_hi, t_lo))

    for cen, reff in footprint:
        fx = starts[:, 0] - cen[0]
        fy = starts[:, 1] - cen[1]
        b = fx * dirs[:, 0] + fy * dirs[:, 1]
        c0 = fx * fx + fy * fy - reff * reff
        disc = b * b - c0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = -b - sq
        t = np.where((disc >= 0) & (t0 > 0.0), t0, np.inf)
        d_l = np.minimum(d_l, t)

    return float(np.mean(d_l))


# --- metrics and reports ---------------------------------------------------------


@dataclass
class AgentReport:
    l: float
    t: float
    vbar: float
    vmax: float
    dmin: float
    domin: float
    sr_acc: bool
    sr_conv: bool
    sr_safe: bool
    trajectory: np.ndarray | None = None  # physics-rate samples, not serialized


@dataclass
class RunReport:
    scenario: str
    seed: int
    tau: float
    t_end: float
    delta: float = float("nan")
    agents: list = field(default_factory=list)


def metrics_finalize(world: World, trajectories: list, scenario: str, tau: float) -> RunReport:
    delta = world.agents[0].delta if world.agents else float("nan")
    rep = RunReport(scenario=scenario, seed=world.seed, tau=tau, t_end=world.time, delta=delta)
    for ag, traj in zip(world.agents, trajectories):
        pos = traj[:, 1:4]
        l = float(np.linalg.norm(np.diff(pos, axis=0), axis=1).sum())
        t = ag.conv_t
        if math.isnan(t):
            vbar = math.nan
        elif t == 0.0:
            vbar = 0.0
        else:
            vbar = l / t
        sr_conv = not math.isnan(t)
        sr_safe = ag.do_min >= ag.delta and ag.pair_margin >= 0.0
        rep.agents.append(
            AgentReport(
                l=l,
                t=t,
                vbar=vbar,
                vmax=ag.v_max_seen,
                dmin=ag.d_min,
                domin=ag.do_min,
                sr_acc=ag.acc_ok,
                sr_conv=sr_conv,
                sr_safe=bool(sr_safe),
                trajectory=traj,
            )
        )
    return rep


def _fmt(x) -> str:
    """9-significant-digit float field; nan/inf become null (JSON has neither)."""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    xf = float(x)
    if math.isnan(xf) or math.isinf(xf):
        return "null"
    return "%.9g" % xf


def report_json(rep: RunReport) -> str:
    lines = ["{"]
    lines.append('  "scenario": "%s",' % rep.scenario)
    lines.append('  "seed": %d,' % rep.seed)
    lines.append('  "delta": %s,' % _fmt(rep.delta))
    lines.append('  "tau": %s,' % _fmt(rep.tau))
    lines.append('  "t_end": %s,' % _fmt(rep.t_end))
    lines.append('  "agents": [')
    rows = []
    for a in rep.agents:
        rows.append(
            "    {"
            + ", ".join(
                '"%s": %s' % (k, _fmt(v))
                for k, v in (
                    ("l", a.l),
                    ("t", a.t),
                    ("vbar", a.vbar),
                    ("vmax", a.vmax),
                    ("dmin", a.dmin),
                    ("domin", a.domin),
                    ("sr_acc", a.sr_acc),
                    ("sr_conv", a.sr_conv),
                    ("sr_safe", a.sr_safe),
                )
            )
            + "}"
        )
    lines.append(",\n".join(rows))
    lines.append("  ]")
    lines.append("}")
    return "\n".join(lines) + "\n"


# --- scenario generation ----------------------------------------------------------


def default_config() -> dict:
    return {
        "scenario": "circle",
        "N": 10,
        "delta": 0.2,
        "fov": list(FOV_PRESETS["half"]),
        "r_s": 5.0,
        "d_u": 0.3,
        "beta_d": 0.5,
        "epsilon_sep": 0.5,
        "epsilon_rot": 0.05,
        "d_1": 1.0,
        "d_2": 1.0,
        "d_3": 1.0,
        "d_4": 1.0,
        "k_wp": 1.0,
        "k_beta": 1.0,
        "d_v": 0.1,  # carried for config compatibility; unused by this model
        "resolution": 0.25,
        "lookahead": 4.0,
        "dt_physics": 0.01,
        "dt_ctl": 0.1,
        "t_max": 120.0,
        "d_goal": 1.0,
        "t_replan": 0.5,
        "altitude": 1.5,
        "circle_radius": 15.0,
        "n_obstacles": 8,
        "obstacle_radius": [0.4, 0.8],
        "forest_size": [24.0, 20.0],
        "forest_count": 22,
        "forest_gap": 2.4,
        "sigma_obs": 0.0,
        "occlusion": False,
        "track_timeout": 0.5,
        "obstacles": [],
        "agents": [],
        "mpc": {},
    }


_RANGES = {
    "N": (1, 64),
    "delta": (0.01, 5.0),
    "r_s": (0.5, 50.0),
    "d_u": (0.0, 5.0),
    "beta_d": (1e-3, 50.0),
    "resolution": (0.05, 2.0),
    "t_max": (0.0, 3600.0),
    "circle_radius": (1.0, 100.0),
    "track_timeout": (0.0, 10.0),
}


def normalize_config(cfg: dict) -> dict:
    """Fill defaults and validate; unknown keys and out-of-range values raise."""
    out = default_config()
    for key, val in cfg.items():
        if key not in out:
            raise ConfigError(f"{key}: unknown key")
        out[key] = val
    if out["scenario"] not in SCENARIOS:
        raise ConfigError(f"scenario: unknown kind {out['scenario']!r}")
    for key, (lo, hi) in _RANGES.items():
        v = out[key]
        if not (isinstance(v, (int, float)) and lo <= v <= hi):
            raise ConfigError(f"{key}: expected value in [{lo}, {hi}], got {v!r}")
    fov = out["fov"]
    if isinstance(fov, str):
        if fov not in FOV_PRESETS:
            raise ConfigError(f"fov: unknown preset {fov!r}")
        fov = list(FOV_PRESETS[fov])
        out["fov"] = fov
    if not (isinstance(fov, (list, tuple)) and len(fov) == 3):
        raise ConfigError("fov: expected [f_x, f_z, f_a]")
    f_x, f_z, f_a = (float(v) for v in fov)
    if not (0.0 < f_x <= 360.0):
        raise ConfigError(f"fov.f_x: expected (0, 360], got {f_x}")
    if not (0.0 <= f_z <= 360.0):
        raise ConfigError(f"fov.f_z: expected [0, 360], got {f_z}")
    if not (-90.0 <= f_a <= 90.0):
        raise ConfigError(f"fov.f_a: expected [-90, 90], got {f_a}")
    mpc = out["mpc"]
    if not isinstance(mpc, dict):
        raise ConfigError("mpc: expected a table of controller overrides")
    allowed = set(MpcConfig.__dataclass_fields__)
    for k in mpc:
        if k not in allowed:
            raise ConfigError(f"mpc.{k}: unknown key")
    return out


def _rule_params(cfg: dict) -> RuleParams:
    return RuleParams(
        beta_D=cfg["beta_d"],
        k_beta=cfg["k_beta"],
        k_wp=cfg["k_wp"],
        d_1=cfg["d_1"],
        d_2=cfg["d_2"],
        d_3=cfg["d_3"],
        d_4=cfg["d_4"],
        d_u=cfg["d_u"],
        epsilon_rot=cfg["epsilon_rot"],
    )


def _sim_params(cfg: dict) -> SimParams:
    return SimParams(
        dt_physics=cfg["dt_physics"],
        dt_ctl=cfg["dt_ctl"],
        t_max=cfg["t_max"],
        d_goal=cfg["d_goal"],
        t_replan=cfg["t_replan"],
        lookahead=cfg["lookahead"],
        r_s=cfg["r_s"],
        resolution=cfg["resolution"],
        epsilon_sep=cfg["epsilon_sep"],
        sigma_obs=cfg["sigma_obs"],
        occlusion=bool(cfg["occlusion"]),
        track_timeout=cfg["track_timeout"],
        rule=_rule_params(cfg),
        mpc=MpcConfig(**cfg["mpc"]),
    )


def _make_agent(start, goal, delta, fov_t, cfg, planar: bool) -> Agent:
    start = as_vec3(start)
    goal = as_vec3(goal)
    d = goal - start
    yaw = math.atan2(d[1], d[0]) if np.hypot(d[0], d[1]) > 1e-9 else 0.0
    fov = FovSpec(f_x=fov_t[0], f_z=fov_t[1], f_a=fov_t[2])
    # a robot that cannot look above the level plane cannot track a climbing
    # route (upward targets project back onto itself), so keep its routes level
    sees_up = fov.f_a + 0.5 * fov.f_z > 0.0
    return Agent(
        state=RobotState(p=start.copy(), v=np.zeros(3), a=np.zeros(3), yaw=yaw),
        rule=RuleState(beta=cfg["beta_d"], p_bar=start.copy()),
        grid=OccupancyGrid(cell=cfg["resolution"], inflation=delta + cfg["resolution"]),
        goal=goal,
        delta=delta,
        fov=fov,
        planar=fov.planar,
        route_planar=fov.planar or not sees_up,
    )


def _scatter_cylinders(rng, count, region_fn, r_lo, r_hi, z_range, keep_out, gap):
    """Dart-throwing placement with surface-gap and keep-out constraints."""
    cyls = []
    tries = 0
    while len(cyls) < count and tries < 10_000:
        tries += 1
        xy = region_fn(rng)
        r = rng.uniform(r_lo, r_hi)
        ok = all(
            np.linalg.norm(xy - q[:2]) >= r + clear for q, clear in keep_out
        )
        if ok:
            for c in cyls:
                if np.linalg.norm(xy - c.center) < r + c.radius + gap:
                    ok = False
                    break
        if ok:
            cyls.append(Cylinder(center=xy, radius=r, z_range=z_range))
    return cyls


def build_world(cfg: dict, seed: int) -> World:
    cfg = normalize_config(cfg)
    rng = np.random.default_rng(seed)
    rng_world, rng_trav, rng_noise = rng.spawn(3)

    fov_t = tuple(float(v) for v in cfg["fov"])
    delta = float(cfg["delta"])
    alt = float(cfg["altitude"])
    n = int(cfg["N"])
    scenario = cfg["scenario"]
    z_obs = (0.0, alt + 2.5)
    planar = fov_t[1] == 0.0

    cylinders: list = []
    spheres: list = []
    if scenario in ("circle", "circle_obstacles"):
        radius = float(cfg["circle_radius"])
        # seeded jitter so different seeds give genuinely different exchanges
        ang = 2.0 * math.pi * np.arange(n) / n + rng_world.uniform(-0.2, 0.2, n)
        rad = radius + rng_world.uniform(-0.5, 0.5, n)
        starts = np.column_stack(
            [rad * np.cos(ang), rad * np.sin(ang), np.full(n, alt)]
        )
        goals = np.column_stack(
            [-rad * np.cos(ang), -rad * np.sin(ang), np.full(n, alt)]
        )
        lo = np.array([-radius - 5.0, -radius - 5.0, 0.0])
        hi = np.array([radius + 5.0, radius + 5.0, alt + 3.0])
        if scenario == "circle_obstacles":
            keep_out = [(s, 2.5) for s in starts] + [(g, 2.5) for g in goals]
            r_lo, r_hi = cfg["obstacle_radius"]

            def region(r):
                rr = radius * 0.6 * math.sqrt(r.random())
                th = r.random() * 2.0 * math.pi
                return np.array([rr * math.cos(th), rr * math.sin(th)])

            cylinders = _scatter_cylinders(
                rng_world, int(cfg["n_obstacles"]), region, r_lo, r_hi, z_obs, keep_out, 2.4
            )
    elif scenario == "forest":
        size_x, size_y = (float(v) for v in cfg["forest_size"])
        ys = np.linspace(size_y * 0.2, size_y * 0.8, n)
        starts = np.column_stack([np.full(n, 1.0), ys, np.full(n, alt)])
        goals = np.column_stack([np.full(n, size_x - 1.0), ys, np.full(n, alt)])
        lo = np.array([0.0, 0.0, 0.0])
        hi = np.array([size_x, size_y, alt + 3.0])
        keep_out = [(s, 2.0) for s in starts] + [(g, 2.0) for g in goals]
        r_lo, r_hi = cfg["obstacle_radius"]

        def region(r):
            return np.array(
                [
                    r.uniform(size_x * 0.2, size_x * 0.8),
                    r.uniform(1.5, size_y - 1.5),
                ]
            )

        cylinders = _scatter_cylinders(
            rng_world,
            int(cfg["forest_count"]),
            region,
            min(r_lo, 0.6),
            min(r_hi, 0.6),
            z_obs,
            keep_out,
            float(cfg["forest_gap"]),
        )
    elif scenario == "custom":
        starts, goals = [], []
        for k, spec in enumerate(cfg["agents"]):
            if "start" not in spec or "goal" not in spec:
                raise ConfigError(f"agents[{k}]: needs start and goal")
            starts.append(as_vec3(spec["start"]))
            goals.append(as_vec3(spec["goal"]))
        starts = np.asarray(starts, dtype=float).reshape(-1, 3)
        goals = np.asarray(goals, dtype=float).reshape(-1, 3)
        n = len(starts)
        for k, spec in enumerate(cfg["obstacles"]):
            kind = spec.get("type")
            ctr = np.asarray(spec.get("center", ()), dtype=float).ravel()
            if kind == "cylinder":
                if ctr.size not in (2, 3):  # a vertical axis only needs x, y
                    raise ConfigError(f"obstacles[{k}].center: expected [x, y]")
                cylinders.append(
                    Cylinder(
                        center=ctr[:2],
                        radius=float(spec["radius"]),
                        z_range=tuple(spec.get("z_range", z_obs)),
                    )
                )
            elif kind == "sphere":
                if ctr.size != 3:
                    raise ConfigError(f"obstacles[{k}].center: expected [x, y, z]")
                spheres.append(Sphere(center=ctr, radius=float(spec["radius"])))
            else:
                raise ConfigError(f"obstacles[{k}].type: expected cylinder or sphere")
        pts = np.vstack([starts, goals]) if n else np.zeros((1, 3))
        lo = pts.min(axis=0) - 5.0
        hi = pts.max(axis=0) + 5.0
        lo[2] = min(lo[2], 0.0)
    else:  # pragma: no cover - normalize_config rejects earlier
        raise ConfigError(f"scenario: unknown kind {scenario!r}")

    agents = [
        _make_agent(starts[k], goals[k], delta, fov_t, cfg, planar) for k in range(n)
    ]
    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(starts[i] - starts[j]) <= 2.0 * delta:
                raise ConfigError(f"agents[{j}]: start overlaps agent {i}")

    world = World(
        arena_lo=lo,
        arena_hi=hi,
        cylinders=cylinders,
        spheres=spheres,
        agents=agents,
        params=_sim_params(cfg),
        seed=seed,
        rng_noise=rng_noise,
    )
    world._rng_trav = rng_trav
    return world


def run_scenario(cfg: dict, seed: int, tau_trials: int = 10_000) -> RunReport:
    """Build the world, run to convergence or t_max, return the report."""
    cfg = normalize_config(cfg)
    world = build_world(cfg, seed)
    prm = world.params
    n_steps = int(round(prm.t_max / prm.dt_physics))
    n_agents = len(world.agents)

    trajectories = [np.empty((n_steps + 1, 11)) for _ in range(n_agents)]

    def snap_row(k):
        for i, ag in enumerate(world.agents):
            st = ag.state
            trajectories[i][k, 0] = world.time
            trajectories[i][k, 1:4] = st.p
            trajectories[i][k, 4:7] = st.v
            trajectories[i][k, 7:10] = st.a
            trajectories[i][k, 10] = st.yaw

    snap_row(0)
    # convergence check against the initial placement too (trivial scenarios)
    if n_agents:
        _record_sample(world)
    k_end = 0
    for k in range(n_steps):
        step(world)
        snap_row(k + 1)
        k_end = k + 1
        if all(
            ag.frozen or np.linalg.norm(ag.state.p - ag.goal) <= prm.d_goal
            for ag in world.agents
        ):
            break

    trajectories = [t[: k_end + 1] for t in trajectories]
    tau = traversability(world, tau_trials, rng=world._rng_trav)
    return metrics_finalize(world, trajectories, cfg["scenario"], tau)
