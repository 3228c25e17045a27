"""Metric spaces, canonical coordinates, and weighted point clouds.

The package works on axis-aligned boxes in ``R^d`` where any subset of the
axes may be periodic (a flat torus).  Distances use the minimum-image
convention on periodic axes and transport costs are squared distances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MetricSpace",
    "DiscreteMeasure",
    "unit_torus",
    "box",
    "dist",
    "pairwise_dist",
    "cost_matrix",
]

_WEIGHT_SUM_TOL = 1e-12


def _as_points(x: np.ndarray | list, dim: int) -> np.ndarray:
    """Coerce input to a float array of shape (n, dim), accepting a single
    point of shape (dim,)."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(
            f"expected points of dimension {dim}, got array of shape {arr.shape}"
        )
    return arr


@dataclass(frozen=True)
class MetricSpace:
    """An axis-aligned box with optionally periodic axes.

    Parameters
    ----------
    bounds : ndarray of shape (dim, 2)
        Lower and upper bound per axis.  On periodic axes the upper bound
        is identified with the lower one.
    periodic : ndarray of bool, shape (dim,)
        Which axes wrap around.
    """

    bounds: np.ndarray
    periodic: np.ndarray

    def __post_init__(self):
        bounds = np.array(self.bounds, dtype=float)
        periodic = np.array(self.periodic, dtype=bool).reshape(-1)
        if bounds.ndim != 2 or bounds.shape[1] != 2:
            raise ValueError("bounds must have shape (dim, 2)")
        if periodic.shape[0] != bounds.shape[0]:
            raise ValueError("periodic flags must match the number of axes")
        if not np.all(np.isfinite(bounds)):
            raise ValueError("bounds must be finite")
        if np.any(bounds[:, 1] <= bounds[:, 0]):
            raise ValueError("each axis needs upper bound > lower bound")
        bounds.setflags(write=False)
        periodic.setflags(write=False)
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "periodic", periodic)

    @property
    def dim(self) -> int:
        return self.bounds.shape[0]

    @property
    def periods(self) -> np.ndarray:
        """Axis lengths (upper minus lower bound)."""
        return self.bounds[:, 1] - self.bounds[:, 0]

    def wrap(self, points: np.ndarray | list) -> np.ndarray:
        """Canonicalize coordinates.

        Periodic axes are reduced modulo their period into
        ``[lo, lo + period)``; non-periodic axes are unchanged.  The map is
        idempotent, so canonical coordinates pass through bit-identically.
        """
        single = np.asarray(points).ndim == 1
        pts = _as_points(points, self.dim).copy()
        lo = self.bounds[:, 0]
        per = self.periods
        for ax in np.flatnonzero(self.periodic):
            pts[:, ax] = lo[ax] + np.mod(pts[:, ax] - lo[ax], per[ax])
            # mod can return the period itself when the argument is a tiny
            # negative number; fold that edge case back to the lower bound
            hit = pts[:, ax] >= self.bounds[ax, 1]
            pts[hit, ax] = lo[ax]
        return pts[0] if single else pts

    def contains(self, points: np.ndarray | list, slack: float = 0.0) -> bool:
        """True if all coordinates lie within bounds (up to ``slack``)."""
        pts = _as_points(points, self.dim)
        lo = self.bounds[:, 0] - slack
        hi = self.bounds[:, 1] + slack
        return bool(np.all(pts >= lo) and np.all(pts <= hi))

    def displacement(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Componentwise difference ``a - b`` under the minimum-image
        convention on periodic axes.  Broadcasts over leading axes."""
        delta = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        per = self.periods
        for ax in np.flatnonzero(self.periodic):
            d = delta[..., ax]
            delta[..., ax] = d - per[ax] * np.round(d / per[ax])
        return delta


def unit_torus(dim: int = 1) -> MetricSpace:
    """The flat torus ``[0, 1)^dim`` with all axes periodic."""
    bounds = np.tile([0.0, 1.0], (dim, 1))
    return MetricSpace(bounds, np.ones(dim, dtype=bool))


def box(bounds) -> MetricSpace:
    """A non-periodic box with the given per-axis bounds."""
    bounds = np.asarray(bounds, dtype=float)
    return MetricSpace(bounds, np.zeros(bounds.shape[0], dtype=bool))


def dist(space: MetricSpace, a, b) -> float:
    """Distance between two points of ``space``.

    Euclidean norm of the minimum-image displacement, i.e. the geodesic
    distance of the flat torus on periodic axes.
    """
    a = space.wrap(np.asarray(a, dtype=float))
    b = space.wrap(np.asarray(b, dtype=float))
    delta = space.displacement(a, b)
    return float(np.sqrt(np.sum(delta * delta)))


def pairwise_dist(space: MetricSpace, points_row, points_col) -> np.ndarray:
    """Matrix of distances between two point arrays, shape (n_row, n_col)."""
    return np.sqrt(cost_matrix(space, points_row, points_col))


def cost_matrix(space: MetricSpace, points_row, points_col) -> np.ndarray:
    """Matrix of squared distances, shape (n_row, n_col).

    This is the transport cost used throughout: ``c(x, y) = dist(x, y)^2``.
    """
    P = space.wrap(_as_points(points_row, space.dim))
    Q = space.wrap(_as_points(points_col, space.dim))
    out = np.zeros((P.shape[0], Q.shape[0]))
    per = space.periods
    for ax in range(space.dim):
        d = P[:, ax, None] - Q[None, :, ax]
        if space.periodic[ax]:
            d -= per[ax] * np.round(d / per[ax])
        out += d * d
    return out


@dataclass(frozen=True)
class DiscreteMeasure:
    """A finitely supported probability measure on a metric space.

    Weights must be nonnegative, finite, and sum to one within 1e-12.
    Duplicate support points are allowed and are not merged.  Coordinates
    are canonicalized on construction.
    """

    space: MetricSpace
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = self.space.wrap(_as_points(self.points, self.space.dim))
        w = np.array(self.weights, dtype=float).reshape(-1)
        if w.shape[0] != pts.shape[0]:
            raise ValueError(
                f"{pts.shape[0]} points but {w.shape[0]} weights"
            )
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > _WEIGHT_SUM_TOL:
            raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.points.shape[0]

    @staticmethod
    def uniform(space: MetricSpace, points) -> "DiscreteMeasure":
        """Uniform weights over the given support points."""
        pts = _as_points(points, space.dim)
        n = pts.shape[0]
        if n == 0:
            raise ValueError("need at least one support point")
        return DiscreteMeasure(space, pts, np.full(n, 1.0 / n))
