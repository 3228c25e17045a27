"""Data-generating systems: torus noise mixtures and a planar double gyre.

Each system produces (x, y) sample pairs.  The torus families carry an
explicit joint density (uniform marginal times a wrapped-normal mixture
conditional); the double gyre transports points deterministically with a
volume-preserving velocity field, so it has no joint density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from artifact.errors import NumericalError, UnsupportedError
from artifact.geometry import MetricSpace, box, unit_torus

__all__ = [
    "TorusMixture",
    "DoubleGyre",
    "GroundTruthDensity",
    "wrapped_normal_pdf",
    "density_p",
    "truth",
    "system_spaces",
    "sample_pair",
    "sample_batch",
    "gyre_velocity",
    "gyre_flow",
]

_BOUNDARY_SLACK = 1e-9


def wrapped_normal_pdf(z, sigma: float):
    """Density of a centered normal with scale ``sigma`` wrapped onto [0, 1).

    The image sum is truncated at ``kmax = max(3, ceil(6 * sigma) + 1)``
    terms per side, which keeps the truncation error far below double
    precision for any usable scale.  Accepts arrays.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    z = np.asarray(z, dtype=float)
    kmax = max(3, math.ceil(6.0 * sigma) + 1)
    ks = np.arange(-kmax, kmax + 1, dtype=float)
    u = (z[..., None] + ks) / sigma
    coef = 1.0 / (sigma * math.sqrt(2.0 * math.pi))
    return coef * np.exp(-0.5 * u * u).sum(axis=-1)


@dataclass(frozen=True)
class TorusMixture:
    """Uniform x on the unit torus, y = x + (component shift) + noise.

    The conditional law of the displacement ``y - x`` (mod 1) is a mixture
    of wrapped normals with common scale ``sigma``; component ``c`` adds a
    constant shift ``shifts[c]`` to every axis.  The defaults give the
    one-dimensional two-component family used throughout the experiments.

    Parameters
    ----------
    sigma : float
        Noise scale of every component.
    shifts : tuple of float
        Per-component displacement offsets.
    weights : tuple of float
        Mixture weights; nonnegative, summing to one.
    dim : int
        Torus dimension (1 or 2).
    """

    sigma: float = 0.05
    shifts: tuple = (0.0, 0.3)
    weights: tuple = (0.5, 0.5)
    dim: int = 1

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if len(self.shifts) != len(self.weights):
            raise ValueError("shifts and weights must have equal length")
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to one")
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")

    def describe(self) -> str:
        return (
            f"torus-mixture(dim={self.dim}, sigma={self.sigma!r}, "
            f"shifts={tuple(self.shifts)!r}, weights={tuple(self.weights)!r})"
        )


@dataclass(frozen=True)
class DoubleGyre:
    """Time-periodic double-gyre flow on the box [0, 2] x [0, 1].

    Points are transported over a window of length ``delta_t`` by a
    divergence-free velocity field; the flow map preserves Lebesgue
    measure and keeps the box invariant (the field is tangent to the
    boundary).  Integration uses classical fourth-order Runge-Kutta with
    ``steps`` fixed steps.
    """

    amplitude: float = 0.25
    alpha: float = 0.25
    omega: float = 2.0 * math.pi
    delta_t: float = 3.0
    steps: int = 3000

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.delta_t <= 0:
            raise ValueError("delta_t must be positive")

    def describe(self) -> str:
        return (
            f"double-gyre(amplitude={self.amplitude!r}, alpha={self.alpha!r}, "
            f"omega={self.omega!r}, delta_t={self.delta_t!r}, steps={self.steps})"
        )


System = TorusMixture | DoubleGyre


@dataclass(frozen=True)
class GroundTruthDensity:
    """Reference joint density of a system, when one exists.

    ``pair_density(X, Y)`` evaluates the joint density on the product of
    two point arrays, returning an (n, m) matrix.  Systems that transport
    points deterministically have ``has_density = False`` and no evaluator.
    """

    space_x: MetricSpace
    space_y: MetricSpace
    has_density: bool
    pair_density: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None

    def at(self, x, y) -> float:
        """Joint density at a single pair of points."""
        if not self.has_density:
            raise UnsupportedError("this system has no joint density")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return float(self.pair_density(x, y)[0, 0])


def system_spaces(system: System) -> tuple[MetricSpace, MetricSpace]:
    """Domain and codomain of a system's sample pairs."""
    if isinstance(system, TorusMixture):
        space = unit_torus(system.dim)
        return space, space
    if isinstance(system, DoubleGyre):
        space = box([[0.0, 2.0], [0.0, 1.0]])
        return space, space
    raise TypeError(f"unknown system type {type(system).__name__}")


def _mixture_conditional(system: TorusMixture, delta: np.ndarray) -> np.ndarray:
    """Conditional displacement density at an array of displacements.

    ``delta`` has shape (..., dim); the result drops the last axis.
    """
    out = np.zeros(delta.shape[:-1])
    for w, s in zip(system.weights, system.shifts):
        if w == 0.0:
            continue
        comp = np.ones(delta.shape[:-1])
        for ax in range(system.dim):
            comp *= wrapped_normal_pdf(np.mod(delta[..., ax] - s, 1.0), system.sigma)
        out += w * comp
    return out


def density_p(system: System, x, y) -> float:
    """Joint sample-pair density of ``system`` at (x, y).

    The torus marginal is uniform with density one, so the joint density
    equals the conditional displacement density at ``(y - x) mod 1``.
    """
    if not isinstance(system, TorusMixture):
        raise UnsupportedError(
            f"{type(system).__name__} does not define a joint density"
        )
    x = np.asarray(x, dtype=float).reshape(system.dim)
    y = np.asarray(y, dtype=float).reshape(system.dim)
    return float(_mixture_conditional(system, (y - x)[None, :])[0])


def truth(system: System) -> GroundTruthDensity:
    """Ground-truth density handle for a system."""
    space_x, space_y = system_spaces(system)
    if isinstance(system, TorusMixture):

        def pair_density(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
            X = np.asarray(X, dtype=float)
            Y = np.asarray(Y, dtype=float)
            delta = Y[None, :, :] - X[:, None, :]
            return _mixture_conditional(system, delta)

        return GroundTruthDensity(space_x, space_y, True, pair_density)
    return GroundTruthDensity(space_x, space_y, False, None)


def sample_batch(
    system: System, m: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``m`` independent (x, y) pairs; returns arrays (m, dim) each.

    The draw order per batch is fixed (x first, then mixture components,
    then noise) so that results are reproducible across runs.
    """
    if isinstance(system, TorusMixture):
        d = system.dim
        xs = rng.random((m, d))
        comps = rng.choice(len(system.weights), size=m, p=np.asarray(system.weights))
        noise = rng.normal(0.0, system.sigma, size=(m, d))
        shift = np.asarray(system.shifts, dtype=float)[comps]
        ys = np.mod(xs + shift[:, None] + noise, 1.0)
        return xs, ys
    if isinstance(system, DoubleGyre):
        space, _ = system_spaces(system)
        lo, hi = space.bounds[:, 0], space.bounds[:, 1]
        xs = lo + rng.random((m, 2)) * (hi - lo)
        ys = gyre_flow(system, xs)
        return xs, ys
    raise TypeError(f"unknown system type {type(system).__name__}")


def sample_pair(system: System, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw a single (x, y) pair."""
    xs, ys = sample_batch(system, 1, rng)
    return xs[0], ys[0]


def _gyre_phase(system: DoubleGyre, t: float, x1: np.ndarray):
    """The time-dependent reparametrization f(t, x1) and its x1-derivative."""
    s = system.alpha * math.sin(system.omega * t)
    f = s * x1 * x1 + (1.0 - 2.0 * s) * x1
    dfdx = 2.0 * s * x1 + (1.0 - 2.0 * s)
    return f, dfdx


def gyre_velocity(system: DoubleGyre, t: float, points) -> np.ndarray:
    """Velocity field of the double gyre at time ``t``.

    The field derives from the stream function
    ``psi = A sin(pi f(t, x1)) sin(pi x2)`` and is therefore
    divergence-free; it vanishes in the normal direction on the whole
    boundary of the box.  Accepts a single point or an (n, 2) array.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    x1, x2 = pts[:, 0], pts[:, 1]
    f, dfdx = _gyre_phase(system, t, x1)
    a_pi = math.pi * system.amplitude
    v = np.empty_like(pts)
    v[:, 0] = -a_pi * np.sin(math.pi * f) * np.cos(math.pi * x2)
    v[:, 1] = a_pi * np.cos(math.pi * f) * np.sin(math.pi * x2) * dfdx
    return v[0] if single else v


def gyre_flow(
    system: DoubleGyre, points, t0: float = 0.0, reverse: bool = False
) -> np.ndarray:
    """Transport points over the window [t0, t0 + delta_t].

    Classical RK4 with ``system.steps`` fixed steps; with ``reverse`` the
    integration runs backward from ``t0 + delta_t`` to ``t0``, inverting
    the forward map up to integration error.  Points are clipped to the
    box only to absorb round-off; an excursion beyond 1e-9 is reported as
    a numerical failure rather than silently projected.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    x = np.atleast_2d(pts).copy()
    n_steps = system.steps
    h = system.delta_t / n_steps
    t = t0
    if reverse:
        h = -h
        t = t0 + system.delta_t
    for _ in range(n_steps):
        k1 = gyre_velocity(system, t, x)
        k2 = gyre_velocity(system, t + 0.5 * h, x + (0.5 * h) * k1)
        k3 = gyre_velocity(system, t + 0.5 * h, x + (0.5 * h) * k2)
        k4 = gyre_velocity(system, t + h, x + h * k3)
        x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t += h
    space, _ = system_spaces(system)
    lo, hi = space.bounds[:, 0], space.bounds[:, 1]
    excess = np.maximum(lo - x, x - hi).max(initial=0.0)
    if excess > _BOUNDARY_SLACK:
        raise NumericalError(
            f"trajectory left the domain by {excess:.3e}; "
            "the integration step may be too coarse"
        )
    np.clip(x, lo, hi, out=x)
    return x[0] if single else x
