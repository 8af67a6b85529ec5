"""Density function, weighted centroids, and the adaptive navigation rules.

Each robot steers toward the weighted centroid of its safe visible cell. The
weight field exp(-dist/beta) is peaked at a local point of interest p_bar;
three update rules modulate the peak sharpness (beta decay toward a default,
a lower clamp keeping the centroid clear of the cell boundary) and rotate
p_bar sideways under symmetric congestion to break deadlocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corridor import SeedInCollision, SeedPair, build_B, build_W, inflate_region
from .cwvd import build_A
from .geom import (
    ConvexRegion,
    EmptySampling,
    FovSpec,
    GridSampling,
    OutsideRegion,
    as_vec3,
    discretize,
    distance_to_boundary,
    fov_contains,
    nearest_in_region,
    region_contains,
)

BETA_FLOOR = 1e-3
BETA_CAP = 50.0


class InfeasibleCell(Exception):
    """The safe cell contains no lattice samples; hold position this tick."""


@dataclass
class RuleParams:
    """Adaptive-rule constants (defaults follow the reference tuning)."""

    beta_D: float = 0.5
    k_beta: float = 1.0
    k_wp: float = 1.0
    d_1: float = 1.0
    d_2: float = 1.0
    d_3: float = 1.0
    d_4: float = 1.0
    d_u: float = 0.3
    epsilon_rot: float = 0.05
    beta_cap: float = BETA_CAP


@dataclass
class RuleState:
    beta: float
    p_bar: np.ndarray
    rotated: bool = False

    def __post_init__(self):
        self.p_bar = as_vec3(self.p_bar)


def psi(q, p_bar, beta: float) -> float:
    """Weight of a single point: exp(-dist to the point of interest / beta)."""
    return float(np.exp(-np.linalg.norm(as_vec3(q) - as_vec3(p_bar)) / beta))


def _sample_dists(samples: GridSampling, p_bar: np.ndarray) -> np.ndarray:
    d = samples.points - p_bar
    return np.sqrt(np.einsum("ij,ij->i", d, d))


def _centroid_from_dists(samples: GridSampling, dists: np.ndarray, beta: float) -> np.ndarray:
    # exp is shift-invariant in the weighted mean; subtracting the minimum
    # distance keeps small beta from underflowing every weight to zero
    w = samples.weights * np.exp(-(dists - dists.min()) / beta)
    return (w @ samples.points) / w.sum()


def centroid(samples: GridSampling, p_bar, beta: float) -> np.ndarray:
    """Weight-averaged position of the sample set."""
    if len(samples) == 0:
        raise EmptySampling("centroid of an empty sampling")
    return _centroid_from_dists(samples, _sample_dists(samples, as_vec3(p_bar)), beta)


def free_centroid(ball_samples: GridSampling, p_bar, beta: float) -> np.ndarray:
    """Centroid of the unconstrained sensing ball under the same weight field."""
    return centroid(ball_samples, p_bar, beta)


def beta_min(
    region: ConvexRegion,
    samples: GridSampling,
    p_bar,
    d_u: float,
    beta_cap: float = BETA_CAP,
) -> float:
    """Smallest beta whose centroid keeps d_u clearance from the cell boundary.

    Feasibility bisection over [BETA_FLOOR, beta_cap]; distance-to-boundary is
    monotone non-decreasing in beta on convex cells, and a short downward scan
    at the end guards the occasional non-monotone sampling artifact.
    """
    if len(samples) == 0:
        raise EmptySampling("beta_min over an empty sampling")
    dists = _sample_dists(samples, as_vec3(p_bar))

    def feasible(beta: float) -> bool:
        c = _centroid_from_dists(samples, dists, beta)
        try:
            return distance_to_boundary(region, c) >= d_u
        except OutsideRegion:
            return False

    if feasible(BETA_FLOOR):
        return BETA_FLOOR
    if not feasible(beta_cap):
        return beta_cap
    lo, hi = BETA_FLOOR, beta_cap
    for _ in range(24):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    step = (beta_cap - BETA_FLOOR) / 2**24
    for k in range(-5, 6):
        cand = hi + k * step
        if BETA_FLOOR <= cand < hi and feasible(cand):
            return cand
    return hi


def update_beta(
    state: RuleState,
    c_B,
    c_S,
    p,
    dt: float,
    params: RuleParams,
    region: ConvexRegion,
    samples: GridSampling,
) -> float:
    """One Euler step of the spreading-factor rule, clamped to the safe band."""
    c_B, c_S, p = as_vec3(c_B), as_vec3(c_S), as_vec3(p)
    congested = (
        np.linalg.norm(c_B - p) < params.d_1
        and np.linalg.norm(c_B - c_S) > params.d_2
    )
    if congested:
        beta = state.beta - params.k_beta * state.beta * dt
    else:
        beta = state.beta - params.k_beta * (state.beta - params.beta_D) * dt
    beta = min(max(beta, BETA_FLOOR), params.beta_cap)

    # fast path: when the candidate already keeps the clearance the clamp is
    # inactive (distance grows with beta), so skip the bisection entirely
    dists = _sample_dists(samples, state.p_bar)
    c = _centroid_from_dists(samples, dists, beta)
    try:
        if distance_to_boundary(region, c) >= params.d_u:
            return beta
    except OutsideRegion:
        pass
    lo = beta_min(region, samples, state.p_bar, params.d_u, params.beta_cap)
    return min(max(beta, lo), params.beta_cap)


def _rotate_about_vertical(p: np.ndarray, wp: np.ndarray, angle: float) -> np.ndarray:
    ca, sa = np.cos(angle), np.sin(angle)
    v = wp - p
    return p + np.array(
        [ca * v[0] - sa * v[1], sa * v[0] + ca * v[1], v[2]]
    )


def update_pbar(
    state: RuleState,
    wp,
    c_B,
    c_B_bar,
    c_S,
    p,
    dt: float,
    params: RuleParams,
) -> tuple[np.ndarray, bool]:
    """One Euler step of the point-of-interest rule with the snap-back reset."""
    wp, c_B, c_B_bar = as_vec3(wp), as_vec3(c_B), as_vec3(c_B_bar)
    c_S, p = as_vec3(c_S), as_vec3(p)

    congested = (
        np.linalg.norm(c_B - p) < params.d_3
        and np.linalg.norm(c_B - c_S) > params.d_4
    )
    # snap back only once the congestion has cleared: resetting mid-congestion
    # re-rotates next tick and the alternation deadlocks symmetric clusters
    if (
        state.rotated
        and not congested
        and np.linalg.norm(p - c_B_bar) > np.linalg.norm(p - c_B)
    ):
        return wp.copy(), False

    if congested:
        target = _rotate_about_vertical(p, wp, np.pi / 2 - params.epsilon_rot)
        rotated = True
    else:
        target = wp
        rotated = state.rotated
    p_bar = state.p_bar - params.k_wp * (state.p_bar - target) * dt
    return p_bar, rotated


@dataclass
class TickView:
    """Frozen per-robot snapshot consumed by one pipeline tick."""

    position: np.ndarray
    heading: np.ndarray
    r_s: float
    resolution: float
    delta: float
    neighbors: list  # (position, delta_j) pairs
    cloud: np.ndarray  # obstacle surface points, robots already removed
    fov: FovSpec
    wp: np.ndarray
    second_seed: np.ndarray | None  # previous tick's projection, if fresh
    epsilon_sep: float = 0.5
    robot_radius: float | None = None  # corridor inflation radius; defaults to delta

    def __post_init__(self):
        self.position = as_vec3(self.position)
        self.heading = as_vec3(self.heading)
        self.wp = as_vec3(self.wp)
        if self.second_seed is not None:
            self.second_seed = as_vec3(self.second_seed)
        if self.robot_radius is None:
            self.robot_radius = self.delta


@dataclass
class TickResult:
    c_B: np.ndarray
    proj_W: np.ndarray
    state: RuleState
    B: ConvexRegion
    c_S: np.ndarray
    c_B_bar: np.ndarray
    seeds: SeedPair


def _corridor_with_retreat(view: TickView, ball: ConvexRegion):
    """Inflate the corridor, retreating the second seed on collision.

    The second seed is the previous tick's projected centroid; fresh sensing
    may reveal it is no longer clear, in which case it is walked back toward
    the robot and ultimately dropped (coincident seeds). A failure even then
    means an obstacle point overlaps the robot itself.
    """
    p = view.position
    s2 = view.second_seed if view.second_seed is not None else p
    for _ in range(5):
        seeds = SeedPair(p, s2)
        try:
            return inflate_region(view.cloud, seeds, view.robot_radius, ball), seeds
        except SeedInCollision:
            s2 = p + 0.5 * (s2 - p)
    seeds = SeedPair(p, p)
    return inflate_region(view.cloud, seeds, view.robot_radius, ball), seeds


def project_onto_visible(W, samples_W: GridSampling, q: np.ndarray) -> np.ndarray:
    """Nearest point of the visible set to q.

    The visible set is the convex cell cut by the sensor wedge, which is not
    convex in general. Candidates: the convex projection onto the cell when it
    lands inside the wedge, the nearest visible lattice sample, and the robot
    position when the cell still contains it (deep neighbor intrusion can
    evict it). The cell projection is the last resort even when it falls
    outside the wedge: a steering target must stay inside the safe cell.
    """
    proj_B = nearest_in_region(W.B, q)
    best, best_d = None, np.inf
    if fov_contains(W.fov, W.position, W.heading, proj_B):
        best, best_d = proj_B, float(np.linalg.norm(q - proj_B))
    if region_contains(W.B, W.position, tol=1e-9):
        d = float(np.linalg.norm(q - W.position))
        if d < best_d:
            best, best_d = W.position, d
    if len(samples_W):
        d2 = np.einsum("ij,ij->i", samples_W.points - q, samples_W.points - q)
        k = int(np.argmin(d2))
        if d2[k] < best_d**2:
            best, best_d = samples_W.points[k], float(np.sqrt(d2[k]))
    if best is None:
        best = proj_B
    return np.asarray(best, dtype=float)


def pipeline_tick(view: TickView, state: RuleState, params: RuleParams, dt: float) -> TickResult:
    """One full rule iteration: region construction, centroid, projection, rules."""
    p = view.position
    ball = ConvexRegion(p, view.r_s, [])

    A = build_A(p, view.delta, view.neighbors, view.epsilon_sep)
    try:
        C, seeds = _corridor_with_retreat(view, ball)
    except SeedInCollision as exc:
        raise InfeasibleCell("own position overlaps an obstacle sphere") from exc
    B = build_B(ball, A, C)

    try:
        samples_B = discretize(B, view.resolution)
    except EmptySampling as exc:
        raise InfeasibleCell("safe cell admits no lattice samples") from exc

    W = build_W(B, view.fov, p, view.heading)
    samples_W = W.filter(samples_B)

    dists = _sample_dists(samples_B, state.p_bar)
    c_B = _centroid_from_dists(samples_B, dists, state.beta)
    c_B_bar = centroid(samples_B, view.wp, state.beta)

    ball_samples = discretize(ball, view.resolution)
    c_S = free_centroid(ball_samples, state.p_bar, state.beta)

    proj = project_onto_visible(W, samples_W, c_B)

    beta_next = update_beta(state, c_B, c_S, p, dt, params, B, samples_B)
    p_bar_next, rotated_next = update_pbar(
        state, view.wp, c_B, c_B_bar, c_S, p, dt, params
    )
    return TickResult(
        c_B=c_B,
        proj_W=proj,
        state=RuleState(beta_next, p_bar_next, rotated_next),
        B=B,
        c_S=c_S,
        c_B_bar=c_B_bar,
        seeds=seeds,
    )
