"""Free-space corridor: separating half-spaces against an obstacle point cloud.

Obstacle points are inflated to spheres of the robot radius. The corridor is
grown around a two-point focal segment (the seeds): the family of confocal
prolate spheroids {x : |x-s_a| + |x-s_b| = 2t} provides a metric ordering, and
for each cloud point we place the plane tangent to its sphere at the point of
smallest confocal parameter t. Such a plane simultaneously supports the sphere
(so the whole sphere is excluded with exact clearance) and the confocal
spheroid through the tangent point (so both seeds, which sit at parameter
t = c < t*, stay strictly inside). Planes are added nearest-first and points
whose spheres are already excluded are dropped, capped at 200 planes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import ConvexRegion, FovSpec, GridSampling, HalfSpace, as_vec3, fov_mask, region_contains

MAX_PLANES = 200
_SEP_TOL = 1e-6  # clearance slack allowed by the region contract


class SeedInCollision(Exception):
    """A cloud sphere reaches the focal segment; no separating plane exists."""


class CorridorOverflow(Exception):
    """More separating planes than the cap would be required."""


@dataclass
class SeedPair:
    s_a: np.ndarray
    s_b: np.ndarray

    def __post_init__(self):
        self.s_a = as_vec3(self.s_a)
        self.s_b = as_vec3(self.s_b)


def _segment_distances(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return np.linalg.norm(pts - a, axis=1)
    s = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
    proj = a + s[:, None] * ab
    return np.linalg.norm(pts - proj, axis=1)


def _estimate_t(pts: np.ndarray, radius: float, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Upper bound on the minimal confocal parameter over each point's sphere.

    One descent step from the point along the confocal gradient; used only to
    order candidates nearest-first, so an upper bound is sufficient.
    """
    da = pts - a
    db = pts - b
    na = np.sqrt(np.einsum("ij,ij->i", da, da))[:, None]
    nb = np.sqrt(np.einsum("ij,ij->i", db, db))[:, None]
    w = da / np.maximum(na, 1e-30) + db / np.maximum(nb, 1e-30)
    w /= np.maximum(np.sqrt(np.einsum("ij,ij->i", w, w))[:, None], 1e-30)
    x = pts - radius * w
    return 0.5 * (
        np.sqrt(np.einsum("ij,ij->i", x - a, x - a))
        + np.sqrt(np.einsum("ij,ij->i", x - b, x - b))
    )


def _refine_tangency(o: np.ndarray, radius: float, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sphere point minimizing the confocal parameter (scalar fixed point).

    At the minimizer the confocal gradient (sum of unit vectors from the two
    foci) is anti-parallel to the outward sphere normal; iterate that identity
    with damping. Plain floats: this runs once per added plane.
    """
    import math

    ox, oy, oz = float(o[0]), float(o[1]), float(o[2])
    ax, ay, az = float(a[0]), float(a[1]), float(a[2])
    bx, by, bz = float(b[0]), float(b[1]), float(b[2])

    def gdir(x, y, z):
        dax, day, daz = x - ax, y - ay, z - az
        dbx, dby, dbz = x - bx, y - by, z - bz
        na = math.sqrt(dax * dax + day * day + daz * daz) or 1e-30
        nb = math.sqrt(dbx * dbx + dby * dby + dbz * dbz) or 1e-30
        wx = dax / na + dbx / nb
        wy = day / na + dby / nb
        wz = daz / na + dbz / nb
        nw = math.sqrt(wx * wx + wy * wy + wz * wz) or 1e-30
        return wx / nw, wy / nw, wz / nw

    def tval(x, y, z):
        return 0.5 * (
            math.sqrt((x - ax) ** 2 + (y - ay) ** 2 + (z - az) ** 2)
            + math.sqrt((x - bx) ** 2 + (y - by) ** 2 + (z - bz) ** 2)
        )

    gx, gy, gz = gdir(ox, oy, oz)
    dx, dy, dz = -gx, -gy, -gz
    bx_, by_, bz_ = dx, dy, dz
    bt = tval(ox + radius * dx, oy + radius * dy, oz + radius * dz)
    s = 0.5
    for _ in range(160):
        x, y, z = ox + radius * dx, oy + radius * dy, oz + radius * dz
        gx, gy, gz = gdir(x, y, z)
        nx, ny, nz = dx - s * (gx + dx), dy - s * (gy + dy), dz - s * (gz + dz)
        nn = math.sqrt(nx * nx + ny * ny + nz * nz) or 1e-30
        nx, ny, nz = nx / nn, ny / nn, nz / nn
        moved = (nx - dx) ** 2 + (ny - dy) ** 2 + (nz - dz) ** 2
        dx, dy, dz = nx, ny, nz
        t = tval(ox + radius * dx, oy + radius * dy, oz + radius * dz)
        if t < bt:
            bt, bx_, by_, bz_ = t, dx, dy, dz
        else:
            # overshoot: the iteration is oscillating around the minimizer,
            # restart from the best point with gentler steps
            s *= 0.7
            dx, dy, dz = bx_, by_, bz_
        if moved < 1e-24 or s < 1e-6:
            break
    return np.array([ox + radius * bx_, oy + radius * by_, oz + radius * bz_])


def inflate_region(cloud, seeds: SeedPair, robot_radius: float, bound: ConvexRegion) -> list[HalfSpace]:
    """Half-spaces that exclude every robot_radius-sphere around cloud points.

    Both seeds stay strictly inside every returned half-space. Raises
    SeedInCollision when a cloud sphere reaches either seed or the open focal
    segment between them (no plane can separate it while keeping both seeds).
    """
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return []
    radius = float(robot_radius)
    a, b = seeds.s_a, seeds.s_b

    # points beyond the sensing ball plus the probe radius cannot constrain it
    d2 = np.einsum("ij,ij->i", pts - bound.center, pts - bound.center)
    pts = pts[d2 <= (bound.radius + radius) ** 2]
    if len(pts) == 0:
        return []

    if np.min(_segment_distances(pts, a, b)) <= radius + 1e-9:
        raise SeedInCollision("cloud sphere reaches the focal segment")

    # order candidates nearest-first by a cheap confocal upper bound; exact
    # tangency is only refined for the few points that become planes
    order = np.argsort(_estimate_t(pts, radius, a, b), kind="stable")
    pts = pts[order]

    excluded = np.zeros(len(pts), dtype=bool)
    planes: list[HalfSpace] = []
    for i in range(len(pts)):
        if excluded[i]:
            continue
        if len(planes) >= MAX_PLANES:
            raise CorridorOverflow(f"more than {MAX_PLANES} separating planes needed")
        x_tan = _refine_tangency(pts[i], radius, a, b)
        n = pts[i] - x_tan
        nn = float(np.linalg.norm(n))
        if nn < 1e-12:
            raise SeedInCollision("degenerate tangency at a cloud point")
        nh = n / nn
        # both seeds must stay behind the plane; a failure here means the
        # sphere effectively pinches the focal segment
        if nh @ (a - x_tan) >= -1e-9 or nh @ (b - x_tan) >= -1e-9:
            raise SeedInCollision("separating plane would cut a seed")
        planes.append(HalfSpace(nh, x_tan))
        # drop every cloud point whose sphere is now fully excluded
        margins = (pts - x_tan) @ nh
        excluded |= margins >= radius - 1e-12
    return planes


def build_B(ball: ConvexRegion, A: list[HalfSpace], C: list[HalfSpace]) -> ConvexRegion:
    """Safe convex cell: sensing ball cut by neighbor and obstacle planes."""
    return ConvexRegion(ball.center.copy(), ball.radius, list(A) + list(C))


@dataclass
class VisibleRegion:
    """B intersected with the sensor wedge: predicate plus sampling filter."""

    B: ConvexRegion
    fov: FovSpec
    position: np.ndarray
    heading: np.ndarray

    def __post_init__(self):
        self.position = as_vec3(self.position)
        self.heading = as_vec3(self.heading)

    def contains(self, q, tol: float = 0.0) -> bool:
        return region_contains(self.B, q, tol=tol) and bool(
            fov_mask(self.fov, self.position, self.heading, as_vec3(q)[None, :])[0]
        )

    def mask(self, points: np.ndarray) -> np.ndarray:
        return fov_mask(self.fov, self.position, self.heading, points)

    def filter(self, sampling: GridSampling) -> GridSampling:
        m = self.mask(sampling.points)
        return GridSampling(sampling.resolution, sampling.points[m], sampling.weights[m])


def build_W(B: ConvexRegion, fov: FovSpec, position, heading) -> VisibleRegion:
    """Visible subset of the safe cell (the robot's own position always passes)."""
    return VisibleRegion(B, fov, as_vec3(position), as_vec3(heading))
