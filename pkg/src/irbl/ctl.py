"""Low-level tracking: heading gate, reference shaping, and the tracking QP.

Translation follows a jerk-input triple integrator planned over a receding
horizon with per-axis box bounds; yaw is a decoupled proportional loop with a
rate clamp. The QP is condensed to the input sequence and solved by ADMM on
the stacked input/acceleration/velocity box, then polished to an exact
active-set KKT solution so the returned rollout meets the bounds to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geom import as_vec3


class InfeasibleStart(Exception):
    """Initial state violates the actuation bounds beyond the 10% clamp band."""


@dataclass
class RobotState:
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    yaw: float = 0.0
    yaw_rate: float = 0.0

    def __post_init__(self):
        self.p = as_vec3(self.p)
        self.v = as_vec3(self.v)
        self.a = as_vec3(self.a)


@dataclass
class MpcConfig:
    horizon: int = 20
    dt: float = 0.2
    w_p: float = 1.0
    w_h: float = 0.0  # heading weight of the formal cost; yaw runs decoupled
    w_u: float = 0.05
    v_max: float = 3.0
    a_max: float = 3.0
    j_max: float = 10.0
    yaw_rate_max: float = 1.5
    k_yaw: float = 3.0


@dataclass
class MpcSolution:
    inputs: np.ndarray  # (N, 3) jerk sequence
    positions: np.ndarray  # (N+1, 3) including x0
    velocities: np.ndarray
    accelerations: np.ndarray
    yaw_rate: float
    objective: float


def wrap_angle(x: float) -> float:
    return float(math.atan2(math.sin(x), math.cos(x)))


def desired_heading(c_B, p, current_yaw: float) -> float:
    """Yaw of the horizontal offset toward the cell centroid; hold if tiny."""
    d = as_vec3(c_B) - as_vec3(p)
    if math.hypot(d[0], d[1]) < 1e-6:
        return float(current_yaw)
    return float(math.atan2(d[1], d[0]))


def desired_position(proj_W, p, c_B, yaw: float, f_x: float) -> np.ndarray:
    """Heading gate: track the projected centroid only when it is seeable.

    Returns proj_W when the horizontal direction toward c_B lies within the
    half-angle of the sensor span (vertical-only offsets pass by convention,
    and a full 360 span always passes); otherwise the robot holds position
    and rotates in place.
    """
    proj_W, p, c_B = as_vec3(proj_W), as_vec3(p), as_vec3(c_B)
    if f_x >= 360.0:
        return proj_W.copy()
    d = c_B - p
    hn = math.hypot(d[0], d[1])
    if hn < 1e-6:
        return proj_W.copy()
    dot = (d[0] * math.cos(yaw) + d[1] * math.sin(yaw)) / hn
    if dot > math.cos(math.radians(f_x) / 2.0):
        return proj_W.copy()
    return p.copy()


def gate_prefix(p, c_B, yaw: float, f_x: float, cfg: "MpcConfig") -> int:
    """Horizon steps until the yaw loop brings the centroid into the span.

    The heading gate is evaluated along the predicted yaw trajectory rather
    than only at the current pose: the reference can hold position while the
    robot still faces away and resume tracking within the same horizon. The
    prediction mirrors the clamped proportional yaw loop the plant runs.
    """
    if f_x >= 360.0:
        return 0
    d = as_vec3(c_B) - as_vec3(p)
    hn = math.hypot(d[0], d[1])
    if hn < 1e-6:
        return 0
    target = math.atan2(d[1], d[0])
    cth = math.cos(math.radians(f_x) / 2.0)
    y = float(yaw)
    for k in range(cfg.horizon):
        gap = wrap_angle(target - y)
        if math.cos(gap) > cth:
            return k
        rate = max(-cfg.yaw_rate_max, min(cfg.yaw_rate_max, cfg.k_yaw * gap))
        y += rate * cfg.dt
    return cfg.horizon


# --- condensed QP machinery ----------------------------------------------------

_MAT_CACHE: dict = {}


def _matrices(N: int, dt: float):
    """Linear maps from the jerk sequence to stacked a, v, p trajectories."""
    key = (N, float(dt))
    if key in _MAT_CACHE:
        return _MAT_CACHE[key]
    A_a = np.zeros((N, N))
    A_v = np.zeros((N, N))
    A_p = np.zeros((N, N))
    for j in range(N):
        a = v = p = 0.0
        for k in range(N):
            u = dt if k == j else 0.0  # effect of unit u_j on a after step k
            p += v * dt + 0.5 * a * dt * dt
            v += a * dt
            a += u
            A_a[k, j] = a
            A_v[k, j] = v
            A_p[k, j] = p
    G = np.vstack([np.eye(N), A_a, A_v])
    _MAT_CACHE[key] = (A_p, A_v, A_a, G)
    return _MAT_CACHE[key]


_SOLVER_CACHE: dict = {}


def _solver_mats(N: int, dt: float, w_p: float, w_u: float, rho: float):
    key = (N, float(dt), float(w_p), float(w_u), float(rho))
    if key in _SOLVER_CACHE:
        return _SOLVER_CACHE[key]
    A_p, A_v, A_a, G = _matrices(N, dt)
    H = w_p * (A_p.T @ A_p) + w_u * np.eye(N)
    M = np.linalg.inv(H + rho * (G.T @ G))
    _SOLVER_CACHE[key] = (H, M)
    return _SOLVER_CACHE[key]


def _zero_rollout(x0_axis: np.ndarray, N: int, dt: float):
    """Per-axis (p, v, a) trajectories under zero jerk, steps 1..N."""
    p0, v0, a0 = x0_axis
    ks = np.arange(1, N + 1, dtype=float)
    a = np.full(N, a0)
    v = v0 + a0 * dt * ks
    p = p0 + v0 * dt * ks + 0.5 * a0 * dt * dt * ks * ks
    return p, v, a


def _braking_envelope(v0: float, a0: float, cfg: MpcConfig) -> np.ndarray:
    """Per-step |v| bound: nominal, relaxed where even max braking overshoots.

    From a legal state with large same-sign v and a, no input keeps v inside
    the nominal bound on the next steps (a needs a_0/j_max seconds to die).
    The canonical brake decelerates hard while |v| exceeds nominal, then
    relaxes a to zero; its |v| trace is achievable, so max(v_max, trace) per
    step keeps the QP feasible, returns to nominal within a few steps, and is
    exactly nominal whenever the state has margin.
    """
    N, dt = cfg.horizon, cfg.dt
    bounds = np.empty(N)
    v, a = v0, a0
    for k in range(N):
        a_tgt = -math.copysign(cfg.a_max, v) if abs(v) > cfg.v_max else 0.0
        u = min(max((a_tgt - a) / dt, -cfg.j_max), cfg.j_max)
        v += a * dt
        a += u * dt
        bounds[k] = max(cfg.v_max, abs(v))
    return bounds


def _clamp_start(x0: RobotState, cfg: MpcConfig) -> tuple[np.ndarray, np.ndarray]:
    v = x0.v.copy()
    a = x0.a.copy()
    for arr, lim, name in ((v, cfg.v_max, "velocity"), (a, cfg.a_max, "acceleration")):
        over = np.abs(arr) - lim
        if np.any(over > 0.10 * lim + 1e-12):
            raise InfeasibleStart(f"start {name} beyond the 10% clamp band")
        np.clip(arr, -lim, lim, out=arr)
    return v, a


def _rollout(x0p, x0v, x0a, U: np.ndarray, dt: float):
    N = len(U)
    P = np.empty((N + 1, 3))
    V = np.empty((N + 1, 3))
    A = np.empty((N + 1, 3))
    P[0], V[0], A[0] = x0p, x0v, x0a
    for k in range(N):
        P[k + 1] = P[k] + V[k] * dt + 0.5 * A[k] * dt * dt
        V[k + 1] = V[k] + A[k] * dt
        A[k + 1] = A[k] + U[k] * dt
    return P, V, A


def _objective(P: np.ndarray, U: np.ndarray, p_ref: np.ndarray, cfg: MpcConfig) -> float:
    e = P[1:] - p_ref
    return float(cfg.w_p * np.sum(e * e) + cfg.w_u * np.sum(U * U))


def _polish_axis(H, G, f, c, lo, hi, z, lam, n_iter=300):
    """Exact KKT solve on the active set suggested by ADMM, then repair.

    Active rows are solved as equalities; one change per iteration: a
    wrong-sign multiplier gets dropped, else the worst violated row gets
    added (drop-and-add in the same sweep cycles on degenerate sets). Rows
    can be linearly dependent (consecutive velocity bounds pin the linking
    acceleration), so singular KKT systems fall back to the min-norm solve.
    Returns None when the loop fails to settle (caller brakes instead).
    """
    N = H.shape[1]
    m_all = G.shape[0]
    at_hi = (hi - z < 1e-6) & (lam > -1e-12)
    at_lo = (z - lo < 1e-6) & (lam < 1e-12)
    active = {i: (1 if at_hi[i] else -1) for i in range(m_all) if at_hi[i] or at_lo[i]}
    for i in list(active):
        if at_hi[i] and at_lo[i]:  # degenerate pinch: keep the upper side
            active[i] = 1
    for _ in range(n_iter):
        idx = sorted(active)
        Ga = G[idx]
        ba = np.array([(hi[i] if active[i] > 0 else lo[i]) - c[i] for i in idx])
        m = len(idx)
        K = np.zeros((N + m, N + m))
        K[:N, :N] = H
        K[:N, N:] = Ga.T
        K[N:, :N] = Ga
        rhs = np.concatenate([-f, ba])
        try:
            sol = np.linalg.solve(K, rhs)
            if not np.all(np.isfinite(sol)) or np.linalg.norm(
                K @ sol - rhs
            ) > 1e-6 * max(1.0, np.linalg.norm(rhs)):
                sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        if not np.all(np.isfinite(sol)):
            return None
        u = sol[:N]
        lam_a = sol[N:]
        # multipliers must push inward: >=0 on upper bounds, <=0 on lower
        wrong = [
            (abs(lam_a[t]), idx[t])
            for t in range(m)
            if lam_a[t] * active[idx[t]] < -1e-9
        ]
        if wrong:
            wrong.sort(reverse=True)
            del active[wrong[0][1]]
            continue
        g = G @ u + c
        viol_hi = g - hi
        viol_lo = lo - g
        worst_v, worst_i, worst_side = 0.0, -1, 0
        for i in range(m_all):
            if i in active:
                continue
            if viol_hi[i] > worst_v:
                worst_v, worst_i, worst_side = viol_hi[i], i, 1
            if viol_lo[i] > worst_v:
                worst_v, worst_i, worst_side = viol_lo[i], i, -1
        if worst_v <= 1e-10:
            return u
        active[worst_i] = worst_side
    return None


def solve_mpc(x0: RobotState, p_ref, yaw_ref: float, cfg: MpcConfig) -> MpcSolution:
    """Plan a bounded jerk sequence tracking p_ref; yaw runs a clamped P loop.

    p_ref is a single point or an (N, 3) per-step reference trajectory.
    """
    p_ref = np.asarray(p_ref, dtype=float)
    if p_ref.ndim == 1:
        p_ref = as_vec3(p_ref)
    elif p_ref.shape != (cfg.horizon, 3):
        raise ValueError("p_ref must be a 3-vector or an (horizon, 3) array")
    v0, a0 = _clamp_start(x0, cfg)
    N, dt = cfg.horizon, cfg.dt
    A_p, A_v, A_a, G = _matrices(N, dt)
    rho = 5.0
    H, M = _solver_mats(N, dt, cfg.w_p, cfg.w_u, rho)

    # affine parts of the stacked trajectories and the per-axis cost gradient
    off_p = np.empty((N, 3))
    off_v = np.empty((N, 3))
    off_a = np.empty((N, 3))
    v_bound = np.empty((N, 3))
    for ax in range(3):
        off_p[:, ax], off_v[:, ax], off_a[:, ax] = _zero_rollout(
            (x0.p[ax], v0[ax], a0[ax]), N, dt
        )
        v_bound[:, ax] = _braking_envelope(v0[ax], a0[ax], cfg)
    f = cfg.w_p * (A_p.T @ (off_p - p_ref))

    c = np.vstack([np.zeros((N, 3)), off_a, off_v])
    hi = np.vstack([np.full((N, 3), cfg.j_max), np.full((N, 3), cfg.a_max), v_bound])
    lo = -hi

    U = np.zeros((N, 3))
    Z = np.clip(c, lo, hi)
    Lam = np.zeros_like(Z)
    GT = G.T
    for it in range(300):
        U_prev = U
        U = M @ (rho * (GT @ (Z - c - Lam)) - f)
        Y = G @ U + c
        Z = np.clip(Y + Lam, lo, hi)
        Lam += Y - Z
        # feasibility alone is not enough: interior iterates drifting toward
        # an active bound pass |Y - Z| = 0 long before stationarity
        if (
            it % 25 == 24
            and np.max(np.abs(Y - Z)) < 1e-8
            and np.max(np.abs(U - U_prev)) < 1e-9
        ):
            break

    U_fin = np.empty((N, 3))
    ok = True
    for ax in range(3):
        u = _polish_axis(
            H, G, f[:, ax], c[:, ax], lo[:, ax], hi[:, ax], Z[:, ax], Lam[:, ax]
        )
        if u is None:
            ok = False
            break
        U_fin[:, ax] = u

    if not ok:
        # canonical brake: feasible by construction of the envelope
        U_fin = np.empty((N, 3))
        v = v0.copy()
        a = a0.copy()
        for k in range(N):
            a_tgt = np.where(np.abs(v) > cfg.v_max, -np.copysign(cfg.a_max, v), 0.0)
            U_fin[k] = np.clip((a_tgt - a) / dt, -cfg.j_max, cfg.j_max)
            v += a * dt
            a += U_fin[k] * dt

    P, V, A = _rollout(x0.p, v0, a0, U_fin, dt)

    err = wrap_angle(yaw_ref - x0.yaw)
    yaw_rate = float(np.clip(cfg.k_yaw * err, -cfg.yaw_rate_max, cfg.yaw_rate_max))

    return MpcSolution(
        inputs=U_fin,
        positions=P,
        velocities=V,
        accelerations=A,
        yaw_rate=yaw_rate,
        objective=_objective(P, U_fin, p_ref, cfg),
    )
