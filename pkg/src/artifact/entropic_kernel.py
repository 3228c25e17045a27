"""Entropy-regularized transport potentials and normalized kernels.

Solving the entropic transport problem between a sample cloud and a small
anchor set yields dual potentials (phi, psi).  The induced kernel

    k(x, x_l) = exp((phi(x) + psi_l - dist(x, x_l)^2) / epsilon)

integrates to one against the anchor weights in x and, pooled over the
cloud, to one against the cloud weights in the anchor index.  These two
normalizations are what downstream density estimates are built from.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from artifact.errors import ConvergenceError
from artifact.geometry import DiscreteMeasure, MetricSpace, cost_matrix

__all__ = [
    "EntropicPotentials",
    "KernelMatrix",
    "sinkhorn",
    "plan_matrix",
    "extend_potential",
    "extend_potentials",
    "kernel_matrix",
    "save_potentials",
    "load_potentials",
]

_CHECK_EVERY = 10


@dataclass(frozen=True)
class EntropicPotentials:
    """Converged dual potentials of one entropic transport problem.

    ``phi`` lives on the source support, ``psi`` on the anchor support,
    gauged so that the source-weighted mean of ``phi`` is zero.
    ``residual`` is the largest violation of either plan marginal at the
    final iterate and is at most ``tol`` for a successful solve.
    """

    src: DiscreteMeasure
    anchor: DiscreteMeasure
    epsilon: float
    phi: np.ndarray
    psi: np.ndarray
    residual: float
    tol: float
    iterations: int

    @property
    def space(self) -> MetricSpace:
        return self.src.space


@dataclass(frozen=True)
class KernelMatrix:
    """Kernel values on a grid of evaluation points times the anchor set.

    ``values[r, l]`` is the normalized kernel at (row point r, anchor l);
    each row satisfies ``values[r] @ col_weights == 1`` up to the solver
    tolerance (exactly, for rows off the source support).
    """

    values: np.ndarray
    row_points: np.ndarray
    col_points: np.ndarray
    col_weights: np.ndarray


def _neg_lse(M: np.ndarray, axis: int) -> np.ndarray:
    """Negative log-sum-exp along an axis, stabilized by the row maximum."""
    mx = M.max(axis=axis)
    np.exp(M - np.expand_dims(mx, axis), out=M)
    return -(mx + np.log(M.sum(axis=axis)))


def sinkhorn(
    src: DiscreteMeasure,
    anchor: DiscreteMeasure,
    epsilon: float,
    tol: float = 1e-9,
    max_iter: int = 100_000,
    _phi0: np.ndarray | None = None,
) -> EntropicPotentials:
    """Solve the entropic transport problem between two weighted clouds.

    Alternating log-domain updates of the dual potentials; each update
    integrates against the opposite measure, so a converged pair makes
    both marginals of the primal plan match ``src`` and ``anchor``.
    Convergence is declared when the worst marginal violation of the plan
    drops to ``tol`` in the max norm.

    Parameters
    ----------
    src, anchor : DiscreteMeasure
        The two marginals; weights must be strictly positive.
    epsilon : float
        Regularization strength (squared-distance units).
    tol : float
        Max-norm marginal tolerance on the primal plan.
    max_iter : int
        Iteration budget; exceeding it raises ``ConvergenceError``.

    Returns
    -------
    EntropicPotentials

    Raises
    ------
    ValueError
        If the measures live on different spaces, have zero-weight atoms,
        or ``epsilon`` is not positive.
    ConvergenceError
        If the tolerance is not reached within ``max_iter`` sweeps.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if src.space is not anchor.space and not (
        np.array_equal(src.space.bounds, anchor.space.bounds)
        and np.array_equal(src.space.periodic, anchor.space.periodic)
    ):
        raise ValueError("src and anchor must live on the same space")
    if np.any(src.weights == 0) or np.any(anchor.weights == 0):
        raise ValueError("zero-weight atoms are not allowed here")

    Ce = cost_matrix(src.space, src.points, anchor.points)
    Ce /= epsilon
    loga = np.log(src.weights)
    logb = np.log(anchor.weights)

    phi_e = np.zeros(len(src)) if _phi0 is None else np.asarray(_phi0, float) / epsilon
    psi_e = np.zeros(len(anchor))

    iterations = 0
    residual = np.inf
    while iterations < max_iter:
        # phi update: integrate exp((psi - c)/eps) against the anchor weights
        phi_e = _neg_lse((logb + psi_e)[None, :] - Ce, axis=1)
        # psi update: integrate exp((phi - c)/eps) against the source weights
        psi_e = _neg_lse((loga + phi_e)[:, None] - Ce, axis=0)
        iterations += 1
        if iterations <= 2 or iterations % _CHECK_EVERY == 0 or iterations == max_iter:
            residual = _marginal_residual(loga, logb, phi_e, psi_e, Ce)
            if residual <= tol:
                break
    if residual > tol:
        residual = _marginal_residual(loga, logb, phi_e, psi_e, Ce)
    if residual > tol:
        raise ConvergenceError(
            f"marginal residual {residual:.3e} above tolerance {tol:.1e} "
            f"after {iterations} sweeps",
            residual=float(residual),
            iterations=iterations,
        )

    phi = epsilon * phi_e
    psi = epsilon * psi_e
    # gauge: source-weighted mean of phi is zero (plan is gauge-invariant)
    shift = float(src.weights @ phi)
    phi = phi - shift
    psi = psi + shift
    return EntropicPotentials(
        src=src,
        anchor=anchor,
        epsilon=float(epsilon),
        phi=phi,
        psi=psi,
        residual=float(residual),
        tol=float(tol),
        iterations=iterations,
    )


def _marginal_residual(loga, logb, phi_e, psi_e, Ce) -> float:
    """Largest violation of either plan marginal, in the max norm."""
    logP = (loga + phi_e)[:, None] + (logb + psi_e)[None, :] - Ce
    P = np.exp(logP)
    row_err = np.abs(P.sum(axis=1) - np.exp(loga)).max()
    col_err = np.abs(P.sum(axis=0) - np.exp(logb)).max()
    return float(max(row_err, col_err))


def plan_matrix(pot: EntropicPotentials) -> np.ndarray:
    """Primal transport plan induced by the potentials."""
    C = cost_matrix(pot.space, pot.src.points, pot.anchor.points)
    logP = (
        (np.log(pot.src.weights) + pot.phi / pot.epsilon)[:, None]
        + (np.log(pot.anchor.weights) + pot.psi / pot.epsilon)[None, :]
        - C / pot.epsilon
    )
    return np.exp(logP)


def extend_potentials(pot: EntropicPotentials, side: str, points) -> np.ndarray:
    """Evaluate a dual potential at arbitrary points of its domain.

    ``side = "src"`` extends ``phi`` using the stored ``psi`` (the
    resulting kernel row integrates to exactly one against the anchor
    weights); ``side = "anchor"`` extends ``psi`` symmetrically.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    eps = pot.epsilon
    if side == "src":
        C = cost_matrix(pot.space, pts, pot.anchor.points)
        M = (np.log(pot.anchor.weights) + pot.psi / eps)[None, :] - C / eps
    elif side == "anchor":
        C = cost_matrix(pot.space, pot.src.points, pts).T
        M = (np.log(pot.src.weights) + pot.phi / eps)[None, :] - C / eps
    else:
        raise ValueError(f"side must be 'src' or 'anchor', got {side!r}")
    return eps * _neg_lse(M, axis=1)


def extend_potential(pot: EntropicPotentials, side: str, point) -> float:
    """Scalar version of :func:`extend_potentials`."""
    return float(extend_potentials(pot, side, point)[0])


def _support_lookup(points: np.ndarray) -> dict[bytes, int]:
    """Map canonical coordinates to their first index in the support."""
    table: dict[bytes, int] = {}
    for i in range(points.shape[0] - 1, -1, -1):
        table[points[i].tobytes()] = i
    return table


def kernel_matrix(pot: EntropicPotentials, eval_points=None) -> KernelMatrix:
    """Normalized kernel values at evaluation points times anchors.

    With no evaluation points, rows are the source support and use the
    stored ``phi``.  Otherwise each point is first matched exactly against
    the support (so support points reuse their converged potential value)
    and only genuinely new points get an extended ``phi``, which makes
    their rows integrate to one against the anchor weights exactly.
    """
    eps = pot.epsilon
    if eval_points is None:
        pts = pot.src.points
        phi = pot.phi
    else:
        pts = np.atleast_2d(np.asarray(eval_points, dtype=float))
        pts = pot.space.wrap(pts)
        lookup = _support_lookup(pot.src.points)
        idx = np.array([lookup.get(p.tobytes(), -1) for p in pts])
        phi = np.empty(pts.shape[0])
        on = idx >= 0
        if on.any():
            phi[on] = pot.phi[idx[on]]
        if (~on).any():
            phi[~on] = extend_potentials(pot, "src", pts[~on])
    C = cost_matrix(pot.space, pts, pot.anchor.points)
    values = np.exp((phi[:, None] + pot.psi[None, :] - C) / eps)
    return KernelMatrix(
        values=values,
        row_points=pts,
        col_points=pot.anchor.points,
        col_weights=pot.anchor.weights,
    )


def save_potentials(pot: EntropicPotentials, path) -> None:
    """Serialize potentials (with both supports) to a JSON file."""
    payload = {
        "epsilon": pot.epsilon,
        "tol": pot.tol,
        "residual": pot.residual,
        "iterations": pot.iterations,
        "space": {
            "bounds": pot.space.bounds.tolist(),
            "periodic": pot.space.periodic.tolist(),
        },
        "src": {
            "points": pot.src.points.tolist(),
            "weights": pot.src.weights.tolist(),
        },
        "anchor": {
            "points": pot.anchor.points.tolist(),
            "weights": pot.anchor.weights.tolist(),
        },
        "phi": pot.phi.tolist(),
        "psi": pot.psi.tolist(),
    }
    with open(path, "w", encoding="utf8") as fh:
        json.dump(payload, fh)


def load_potentials(path) -> EntropicPotentials:
    """Inverse of :func:`save_potentials`."""
    with open(path, encoding="utf8") as fh:
        payload = json.load(fh)
    space = MetricSpace(
        np.asarray(payload["space"]["bounds"], dtype=float),
        np.asarray(payload["space"]["periodic"], dtype=bool),
    )
    src = DiscreteMeasure(
        space,
        np.asarray(payload["src"]["points"], dtype=float),
        np.asarray(payload["src"]["weights"], dtype=float),
    )
    anchor = DiscreteMeasure(
        space,
        np.asarray(payload["anchor"]["points"], dtype=float),
        np.asarray(payload["anchor"]["weights"], dtype=float),
    )
    return EntropicPotentials(
        src=src,
        anchor=anchor,
        epsilon=float(payload["epsilon"]),
        phi=np.asarray(payload["phi"], dtype=float),
        psi=np.asarray(payload["psi"], dtype=float),
        residual=float(payload["residual"]),
        tol=float(payload["tol"]),
        iterations=int(payload["iterations"]),
    )
