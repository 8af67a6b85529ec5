"""Pairwise separating half-spaces between robots (buffered Voronoi wedges).

Each neighbor j contributes one half-space to robot i's safe cell. Both
positions are buffered inward by the combined safety radius Delta = delta_i +
delta_j before the separating plane is placed, so any point of the resulting
half-space keeps at least Delta clearance from the neighbor's position. When
the robots are closer than 2*Delta the buffered points swap order and the
plane is placed behind the neighbor's buffered point as an open half-space,
which pushes the cell strictly away from the intruder.
"""

from __future__ import annotations

import numpy as np

from .geom import HalfSpace, as_vec3


class CoincidentRobots(Exception):
    """Two robot positions are too close to define a separating direction."""


def buffered_points(p_i, p_j, delta_i: float, delta_j: float) -> tuple[np.ndarray, np.ndarray]:
    """Move each position toward the other by the combined radius Delta."""
    p_i, p_j = as_vec3(p_i), as_vec3(p_j)
    d = float(np.linalg.norm(p_j - p_i))
    if d < 1e-9:
        raise CoincidentRobots(f"robots at distance {d:.3e}")
    u = (p_j - p_i) / d
    delta = float(delta_i) + float(delta_j)
    return p_i + delta * u, p_j - delta * u


def neighbor_halfspace(p_i, p_j, delta_i: float, delta_j: float, epsilon: float) -> HalfSpace:
    """Separating half-space contributed by neighbor j to robot i's cell.

    epsilon in [0, 1] slides the plane from the own buffered point (0) toward
    the neighbor's buffered point (1); 0.5 puts it midway between them.
    """
    p_i, p_j = as_vec3(p_i), as_vec3(p_j)
    bi, bj = buffered_points(p_i, p_j, delta_i, delta_j)
    n = bj - bi
    if float(np.linalg.norm(n)) < 1e-9:
        # buffered points coincide (distance exactly 2*Delta): fall back to the
        # line direction, plane through the common buffered point, closed side
        u = (p_j - p_i) / float(np.linalg.norm(p_j - p_i))
        return HalfSpace(u, bi, strict=False)
    if float(np.linalg.norm(bi - p_i)) <= float(np.linalg.norm(bj - p_i)):
        return HalfSpace(n, bi + epsilon * n, strict=False)
    # crossed buffered points: keep {q : n . (q - bj) > 0}, stored with the
    # flipped normal so that "inside" stays normal . (q - point) < 0
    return HalfSpace(-n, bj, strict=True)


def build_A(p_i, delta_i: float, neighbors, epsilon: float) -> list[HalfSpace]:
    """One half-space per sensed neighbor (p_j, delta_j)."""
    return [
        neighbor_halfspace(p_i, p_j, delta_i, delta_j, epsilon)
        for (p_j, delta_j) in neighbors
    ]
