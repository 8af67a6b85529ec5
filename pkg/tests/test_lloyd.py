"""Density, centroids, adaptive rules, and the composed per-tick pipeline."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irbl.geom import (
    ConvexRegion,
    EmptySampling,
    FovSpec,
    GridSampling,
    HalfSpace,
    ball_offsets,
    discretize,
    distance_to_boundary,
    region_contains,
)
from irbl.lloyd import (
    BETA_CAP,
    BETA_FLOOR,
    InfeasibleCell,
    RuleParams,
    RuleState,
    TickView,
    beta_min,
    centroid,
    free_centroid,
    pipeline_tick,
    psi,
    update_beta,
    update_pbar,
)

PARAMS = RuleParams()


def ball_sampling(radius=2.0, resolution=0.25, center=(0.0, 0.0, 0.0)):
    region = ConvexRegion(np.asarray(center, dtype=float), radius, [])
    return region, discretize(region, resolution)


# --- density -----------------------------------------------------------------

def test_psi_at_peak_is_one():
    assert psi((1.0, 2.0, 3.0), (1.0, 2.0, 3.0), 0.7) == 1.0


def test_psi_unit_exponent():
    assert abs(psi((2.0, 0.0, 0.0), (0.0, 0.0, 0.0), 2.0) - np.exp(-1)) < 1e-12


def test_psi_ratio_identity():
    p_bar = np.array([0.3, -0.2, 1.0])
    q1, q2 = np.array([1.0, 1.0, 0.0]), np.array([-2.0, 0.5, 0.7])
    beta = 0.8
    d1 = np.linalg.norm(q1 - p_bar)
    d2 = np.linalg.norm(q2 - p_bar)
    ratio = psi(q1, p_bar, beta) / psi(q2, p_bar, beta)
    assert abs(ratio - np.exp((d2 - d1) / beta)) < 1e-12


# --- centroid ----------------------------------------------------------------

def test_centroid_two_point_hand_sum():
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    samples = GridSampling(1.0, pts, np.ones(2))
    c = centroid(samples, (1.0, 0.0, 0.0), 1.0)
    expect = 1.0 / (1.0 + np.exp(-1.0))
    assert abs(c[0] - expect) < 1e-12
    assert abs(c[0] - 0.7311) < 5e-5
    assert c[1] == 0.0 and c[2] == 0.0


def test_centroid_uniform_limit_hits_geometric_center():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, size=(500, 3))
    pts = np.vstack([pts, -pts])  # symmetric cloud
    samples = GridSampling(0.1, pts, np.ones(len(pts)))
    c = centroid(samples, (0.7, -0.3, 0.2), 1e9)
    assert np.linalg.norm(c - pts.mean(axis=0)) < 1e-6


def test_centroid_empty_raises():
    with pytest.raises(EmptySampling):
        centroid(GridSampling(0.1, np.zeros((0, 3)), np.zeros(0)), (0, 0, 0), 1.0)


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    beta=st.floats(1e-3, 50.0),
)
def test_centroid_stays_in_sample_hull(seed, beta):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-3, 3, size=(rng.integers(2, 40), 3))
    samples = GridSampling(0.1, pts, np.ones(len(pts)))
    p_bar = rng.uniform(-5, 5, size=3)
    c = centroid(samples, p_bar, beta)
    assert np.all(c >= pts.min(axis=0) - 1e-9)
    assert np.all(c <= pts.max(axis=0) + 1e-9)


def test_centroid_tiny_beta_snaps_to_nearest_sample():
    # beta far below the sample spacing: all weight on the closest point;
    # also exercises the underflow guard (raw exp(-d/beta) is 0.0 for all d)
    region, samples = ball_sampling()
    p_bar = np.array([1.6, 0.9, -0.4])
    c = centroid(samples, p_bar, 1e-4)
    d = np.linalg.norm(samples.points - p_bar, axis=1)
    assert np.allclose(c, samples.points[np.argmin(d)], atol=1e-9)


def test_free_centroid_uniform_limit_is_ball_center():
    region, samples = ball_sampling(center=(1.0, 2.0, 0.5))
    c = free_centroid(samples, (4.0, 0.0, 0.0), 1e9)
    assert np.linalg.norm(c - region.center) < 1e-6


def test_free_centroid_biases_toward_p_bar():
    region, samples = ball_sampling()
    c = free_centroid(samples, (10.0, 0.0, 0.0), 1.0)
    assert c[0] > 0.1
    assert abs(c[1]) < 1e-9 and abs(c[2]) < 1e-9


def test_free_centroid_is_centroid_on_same_sampling():
    region, samples = ball_sampling()
    p_bar, beta = (3.0, -1.0, 0.2), 0.7
    assert np.array_equal(free_centroid(samples, p_bar, beta), centroid(samples, p_bar, beta))


def test_attraction_monotone_while_attractor_inside():
    # monotone pull holds while p_bar is inside the cell; once it leaves, the
    # attraction saturates (level sets flatten toward planes) and the centroid
    # can retreat by a sliver, so the far regime is checked for boundedness
    # rather than monotonicity (two-sample closed form: the weight gap
    # exp((|q2-p|-|q1-p|)/beta) decays as p recedes)
    region, samples = ball_sampling(radius=2.0)
    prev = -np.inf
    for x in np.linspace(0.0, 1.75, 8):
        c = centroid(samples, (x, 0.0, 0.0), 0.8)
        assert c[0] >= prev - 1e-12
        prev = c[0]
    at_boundary = centroid(samples, (2.0, 0.0, 0.0), 0.8)[0]
    for x in (3.0, 4.5, 6.0, 9.0):
        cx = centroid(samples, (x, 0.0, 0.0), 0.8)[0]
        assert cx >= at_boundary - 0.01
        assert cx < at_boundary + 0.1


# --- beta_min ----------------------------------------------------------------

def test_beta_min_symmetric_cell_returns_floor():
    region, samples = ball_sampling(radius=5.0)
    assert beta_min(region, samples, (0.0, 0.0, 0.0), 0.3) == BETA_FLOOR


def test_beta_min_sliver_returns_cap():
    faces = [
        HalfSpace(np.array([1.0, 0.0, 0.0]), np.array([0.1, 0.0, 0.0])),
        HalfSpace(np.array([-1.0, 0.0, 0.0]), np.array([-0.1, 0.0, 0.0])),
    ]
    region = ConvexRegion(np.zeros(3), 5.0, faces)
    samples = discretize(region, 0.05)
    assert beta_min(region, samples, (4.0, 0.0, 0.0), 0.3) == BETA_CAP


def scan_oracle(region, samples, p_bar, d_u, grid):
    """Independent dense scan of the squared clearance objective."""
    best_beta, best_obj = None, np.inf
    for b in grid:
        c = centroid(samples, p_bar, b)
        try:
            dist = distance_to_boundary(region, c)
        except Exception:
            continue
        obj = (dist - d_u) ** 2
        if obj < best_obj:
            best_obj, best_beta = obj, b
    return best_beta


def test_beta_min_matches_dense_scan_oracle():
    region, samples = ball_sampling(radius=2.0)
    p_bar = np.array([2.0, 0.0, 0.0])  # on the boundary sphere
    d_u = 0.3
    mine = beta_min(region, samples, p_bar, d_u)
    grid = np.arange(BETA_FLOOR, 3.0, 1e-3)
    oracle = scan_oracle(region, samples, p_bar, d_u, grid)
    assert abs(mine - oracle) <= 1e-2


def test_beta_min_feasible_value_keeps_clearance():
    rng = np.random.default_rng(7)
    for _ in range(10):
        center = rng.uniform(-1, 1, 3)
        region = ConvexRegion(center, 2.0, [])
        samples = discretize(region, 0.25)
        p_bar = center + rng.normal(size=3) * 2.0
        b = beta_min(region, samples, p_bar, 0.3)
        if BETA_FLOOR < b < BETA_CAP:
            c = centroid(samples, p_bar, b)
            assert distance_to_boundary(region, c) >= 0.3 - 1e-9


# --- update_beta -------------------------------------------------------------

def wide_cell():
    # symmetric cell whose centroid keeps ample clearance for any beta, so
    # the lower clamp stays at the floor and pure Euler arithmetic is visible
    return ball_sampling(radius=5.0)


def test_update_beta_congested_branch_arithmetic():
    region, samples = wide_cell()
    state = RuleState(0.5, np.zeros(3))
    p = np.zeros(3)
    out = update_beta(state, p, p + np.array([2.0, 0, 0]), p, 0.1, PARAMS, region, samples)
    assert abs(out - 0.45) < 1e-12


def test_update_beta_relax_branch_arithmetic():
    region, samples = wide_cell()
    state = RuleState(0.1, np.zeros(3))
    p = np.zeros(3)
    # c_B far from p: condition fails, beta relaxes toward beta_D
    out = update_beta(state, p + np.array([3.0, 0, 0]), p, p, 0.1, PARAMS, region, samples)
    assert abs(out - 0.14) < 1e-12


def test_update_beta_clamp_activates():
    region, samples = ball_sampling(radius=2.0)
    p_bar = np.array([6.0, 0.0, 0.0])
    state = RuleState(0.05, p_bar)
    p = np.zeros(3)
    out = update_beta(state, p, p + np.array([2.0, 0, 0]), p, 0.1, PARAMS, region, samples)
    lo = beta_min(region, samples, p_bar, PARAMS.d_u)
    assert lo > 0.045  # the Euler candidate (congested branch) is infeasible
    assert out == lo


def test_update_beta_always_in_clamp_band():
    rng = np.random.default_rng(3)
    for _ in range(15):
        center = rng.uniform(-1, 1, 3)
        region = ConvexRegion(center, rng.uniform(1.5, 3.0), [])
        samples = discretize(region, 0.25)
        p_bar = center + rng.normal(size=3) * rng.uniform(0, 4)
        state = RuleState(rng.uniform(1e-3, 2.0), p_bar)
        c_B = centroid(samples, p_bar, state.beta)
        c_S = region.center
        out = update_beta(state, c_B, c_S, center, 0.1, PARAMS, region, samples)
        lo = beta_min(region, samples, p_bar, PARAMS.d_u)
        assert lo - 1e-12 <= out <= PARAMS.beta_cap


# --- update_pbar -------------------------------------------------------------

def test_update_pbar_relaxes_toward_waypoint():
    state = RuleState(0.5, np.zeros(3))
    p = np.array([5.0, 5.0, 0.0])  # far: no congestion
    wp = np.array([1.0, 0.0, 0.0])
    p_bar, rotated = update_pbar(state, wp, p, p, p, p, 0.1, PARAMS)
    assert np.allclose(p_bar, [0.1, 0.0, 0.0], atol=1e-12)
    assert rotated is False


def test_update_pbar_congested_rotates_left():
    eps = 0.01
    params = RuleParams(epsilon_rot=eps)
    state = RuleState(0.5, np.zeros(3))
    p = np.zeros(3)
    wp = np.array([1.0, 0.0, 0.0])
    c_B = p  # close to p
    c_S = p + np.array([2.0, 0.0, 0.0])  # far from c_B: congestion
    p_bar, rotated = update_pbar(state, wp, c_B, c_B, c_S, p, 0.1, params)
    assert rotated is True
    target = p_bar / 0.1  # Euler step from the origin recovers the target
    assert np.allclose(target, [np.sin(eps), np.cos(eps), 0.0], atol=1e-9)
    assert target[1] > 0  # left-hand preference


def test_update_pbar_snap_returns_waypoint_exactly():
    state = RuleState(0.5, np.array([0.3, 0.9, 0.0]), rotated=True)
    p = np.zeros(3)
    wp = np.array([1.0, 0.0, 0.0])
    c_B = np.array([1.0, 0.0, 0.0])
    c_B_bar = np.array([2.0, 0.0, 0.0])  # farther: unrotated pull is stronger
    p_bar, rotated = update_pbar(state, wp, c_B, c_B_bar, p, p, 0.1, PARAMS)
    assert np.array_equal(p_bar, wp)
    assert rotated is False


def test_update_pbar_no_snap_without_rotation_flag():
    state = RuleState(0.5, np.array([0.3, 0.9, 0.0]), rotated=False)
    p = np.zeros(3)
    wp = np.array([1.0, 0.0, 0.0])
    c_B = np.array([1.0, 0.0, 0.0])
    c_B_bar = np.array([2.0, 0.0, 0.0])
    p_bar, rotated = update_pbar(state, wp, c_B, c_B_bar, p, p, 0.1, PARAMS)
    assert not np.array_equal(p_bar, wp)
    assert rotated is False


def test_update_pbar_vertical_component_unrotated():
    # the rotation is planar: z offsets pass through the congestion branch
    params = RuleParams(epsilon_rot=0.05)
    state = RuleState(0.5, np.zeros(3))
    p = np.zeros(3)
    wp = np.array([1.0, 0.0, 2.0])
    c_S = np.array([2.0, 0.0, 0.0])
    p_bar, _ = update_pbar(state, wp, p, p, c_S, p, 1.0, params)
    assert abs(p_bar[2] - 2.0) < 1e-12


# --- pipeline ----------------------------------------------------------------

def clear_view(**overrides):
    kw = dict(
        position=np.zeros(3),
        heading=np.array([1.0, 0.0, 0.0]),
        r_s=5.0,
        resolution=0.25,
        delta=0.3,
        neighbors=[],
        cloud=np.zeros((0, 3)),
        fov=FovSpec(360.0, 360.0, 0.0),
        wp=np.array([4.0, 0.0, 0.0]),
        second_seed=None,
    )
    kw.update(overrides)
    return TickView(**kw)


def test_pipeline_unobstructed_pulls_toward_waypoint():
    state = RuleState(0.5, np.array([4.0, 0.0, 0.0]))
    r = pipeline_tick(clear_view(), state, PARAMS, 0.1)
    assert (r.proj_W - np.zeros(3)) @ np.array([1.0, 0.0, 0.0]) > 0.1
    assert region_contains(r.B, r.c_B, tol=1e-9)


def test_pipeline_centroid_in_cell_random_scenes():
    rng = np.random.default_rng(9)
    for _ in range(8):
        nbrs = [(rng.uniform(-3, 3, 3), 0.3) for _ in range(3)]
        cloud = rng.uniform(-4, 4, size=(50, 3))
        cloud = cloud[np.linalg.norm(cloud, axis=1) > 1.2]
        view = clear_view(neighbors=nbrs, cloud=cloud, fov=FovSpec(180.0, 180.0, -90.0))
        state = RuleState(rng.uniform(0.2, 2.0), rng.uniform(-4, 4, 3))
        try:
            r = pipeline_tick(view, state, PARAMS, 0.1)
        except InfeasibleCell:
            continue
        assert region_contains(r.B, r.c_B, tol=1e-9)
        assert region_contains(r.B, r.proj_W, tol=view.resolution)


def test_pipeline_deep_intrusion_pushes_away():
    # one neighbor overlapping the buffer evicts the robot position from its
    # own cell; the projection must leave p in the direction away from it
    nbr = np.array([0.5, 0.0, 0.0])
    view = clear_view(neighbors=[(nbr, 0.3)])
    state = RuleState(0.5, np.array([4.0, 0.0, 0.0]))
    r = pipeline_tick(view, state, PARAMS, 0.1)
    assert not region_contains(r.B, view.position)
    assert (r.proj_W - view.position) @ (view.position - nbr) > 0.0


def test_pipeline_surrounded_tetrahedron():
    dirs = np.array(
        [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
    ) / np.sqrt(3.0)
    nbrs = [(0.8 * d, 0.3) for d in dirs]  # inside 2*delta = 1.2: squeezed
    view = clear_view(neighbors=nbrs)
    state = RuleState(0.5, np.array([4.0, 0.0, 0.0]))
    r = pipeline_tick(view, state, PARAMS, 0.1)
    # cell is a small tetrahedron around p; the projected target stays inside
    assert region_contains(r.B, r.proj_W, tol=1e-9)
    assert np.linalg.norm(r.proj_W - view.position) < 1.0


def test_pipeline_infeasible_when_crushed():
    # six deep intruders evict p and leave no free lattice point
    dirs = np.array(
        [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
        dtype=float,
    )
    nbrs = [(0.2 * d, 0.3) for d in dirs]
    view = clear_view(neighbors=nbrs)
    state = RuleState(0.5, np.array([4.0, 0.0, 0.0]))
    with pytest.raises(InfeasibleCell):
        pipeline_tick(view, state, PARAMS, 0.1)


def test_pipeline_obstacle_overlap_is_infeasible():
    view = clear_view(cloud=np.array([[0.1, 0.0, 0.0]]))
    state = RuleState(0.5, np.array([4.0, 0.0, 0.0]))
    with pytest.raises(InfeasibleCell):
        pipeline_tick(view, state, PARAMS, 0.1)


def test_pipeline_second_seed_retreats_when_blocked():
    # previous projection sits behind a newly sensed obstacle wall; the tick
    # must still produce a corridor by walking the seed back toward p
    wall_x = 1.0
    yz = np.mgrid[-2:2.1:0.4, -2:2.1:0.4].reshape(2, -1).T
    cloud = np.c_[np.full(len(yz), wall_x), yz]
    view = clear_view(cloud=cloud, second_seed=np.array([2.5, 0.0, 0.0]))
    state = RuleState(0.5, np.array([4.0, 0.0, 0.0]))
    r = pipeline_tick(view, state, PARAMS, 0.1)
    assert np.linalg.norm(r.seeds.s_b - view.position) < 2.5
    assert region_contains(r.B, r.c_B, tol=1e-9)


def test_pipeline_deterministic():
    rng = np.random.default_rng(17)
    cloud = rng.uniform(1.5, 4, size=(200, 3))
    view = clear_view(cloud=cloud, neighbors=[(np.array([2.0, 1.0, 0.0]), 0.3)],
                      fov=FovSpec(180.0, 180.0, -90.0))
    state = RuleState(0.7, np.array([3.0, 1.0, 0.0]))
    r1 = pipeline_tick(view, state, PARAMS, 0.1)
    r2 = pipeline_tick(view, state, PARAMS, 0.1)
    assert np.array_equal(r1.c_B, r2.c_B)
    assert np.array_equal(r1.proj_W, r2.proj_W)
    assert r1.state.beta == r2.state.beta
    assert np.array_equal(r1.state.p_bar, r2.state.p_bar)
