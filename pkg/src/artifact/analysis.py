"""Post-processing of fitted couplings.

Turns a coefficient matrix plus its two entropic kernel expansions into a
pair-density estimate that can be evaluated anywhere, compared against a
known ground truth in L2, condensed into a discrete transfer matrix, and
decomposed spectrally into coherent-set candidates.  Also provides profile
fitting of a scalar model parameter by direct minimization of the batch
functional.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .entropic_kernel import EntropicPotentials, kernel_matrix
from .errors import UnsupportedError
from .geometry import DiscreteMeasure, MetricSpace
from .inference import BatchDataset, Coupling, eval_J_batches
from .systems import GroundTruthDensity

__all__ = [
    "TransferEstimate",
    "q_matrix",
    "q_eval",
    "l2_error",
    "l2_baseline",
    "transfer_matrix",
    "SpectralResult",
    "svd_cluster",
    "parametric_fit",
    "write_profile_csv",
]

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class TransferEstimate:
    """A fitted pair-density estimate in doubly-expanded kernel form.

    The estimate is q(x, y) = sum_{k,l} xi[k, l] * kx_k(x) * ky_l(y), where
    kx and ky are the normalized kernels induced by the two sets of entropic
    potentials and xi is the fitted coefficient matrix.

    Parameters
    ----------
    coupling : Coupling
        Coefficient matrix on the anchor grid, shape (K, L).
    pot_x : EntropicPotentials
        Potentials of the input-side smoothing problem (K anchors).
    pot_y : EntropicPotentials
        Potentials of the output-side smoothing problem (L anchors).
    """

    coupling: Coupling
    pot_x: EntropicPotentials
    pot_y: EntropicPotentials

    def __post_init__(self):
        k, l = self.coupling.xi.shape
        if len(self.pot_x.anchor) != k or len(self.pot_y.anchor) != l:
            raise ValueError(
                "coupling shape %s does not match anchor counts (%d, %d)"
                % (self.coupling.xi.shape, len(self.pot_x.anchor), len(self.pot_y.anchor))
            )

    @property
    def space_x(self) -> MetricSpace:
        return self.pot_x.space

    @property
    def space_y(self) -> MetricSpace:
        return self.pot_y.space


def q_matrix(est: TransferEstimate, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Evaluate the density estimate on the grid X x Y.

    Parameters
    ----------
    est : TransferEstimate
    X : ndarray, shape (n, dx)
    Y : ndarray, shape (m, dy)

    Returns
    -------
    ndarray, shape (n, m)
        Values q(X[i], Y[j]).
    """
    kx = kernel_matrix(est.pot_x, X).values
    ky = kernel_matrix(est.pot_y, Y).values
    return kx @ est.coupling.xi @ ky.T


def q_eval(est: TransferEstimate, x: np.ndarray, y: np.ndarray) -> float:
    """Evaluate the density estimate at a single pair of points."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    y = np.asarray(y, dtype=float).reshape(1, -1)
    return float(q_matrix(est, x, y)[0, 0])


def _midpoint_grid(space: MetricSpace, resolution: int):
    """Tensor midpoint grid over a space; returns (points, cell_volume)."""
    axes = [
        lo + (np.arange(resolution) + 0.5) * (hi - lo) / resolution
        for lo, hi in space.bounds
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    cell = float(np.prod([(hi - lo) / resolution for lo, hi in space.bounds]))
    return pts, cell


def _default_resolution(truth: GroundTruthDensity) -> int:
    pair_dim = truth.space_x.dim + truth.space_y.dim
    return 256 if pair_dim <= 2 else 64


def l2_error(
    est: TransferEstimate,
    truth: GroundTruthDensity,
    resolution: int | None = None,
    chunk: int = 512,
) -> float:
    """L2 distance between the estimate and the true pair density.

    Midpoint-rule quadrature of (q - p)^2 over the product domain, with
    ``resolution`` points per axis.

    Raises
    ------
    UnsupportedError
        If the ground truth has no closed-form density.
    """
    if not truth.has_density:
        raise UnsupportedError("ground truth has no closed-form pair density")
    if resolution is None:
        resolution = _default_resolution(truth)
    Xg, cx = _midpoint_grid(truth.space_x, resolution)
    Yg, cy = _midpoint_grid(truth.space_y, resolution)
    ky = kernel_matrix(est.pot_y, Yg).values
    total = 0.0
    for start in range(0, Xg.shape[0], chunk):
        xb = Xg[start : start + chunk]
        kxb = kernel_matrix(est.pot_x, xb).values
        qb = kxb @ est.coupling.xi @ ky.T
        pb = truth.pair_density(xb, Yg)
        total += float(np.sum((qb - pb) ** 2))
    return math.sqrt(total * cx * cy)


def l2_baseline(
    truth: GroundTruthDensity,
    resolution: int | None = None,
    chunk: int = 512,
) -> float:
    """L2 distance of the true pair density from the trivial estimate q = 1."""
    if not truth.has_density:
        raise UnsupportedError("ground truth has no closed-form pair density")
    if resolution is None:
        resolution = _default_resolution(truth)
    Xg, cx = _midpoint_grid(truth.space_x, resolution)
    Yg, cy = _midpoint_grid(truth.space_y, resolution)
    total = 0.0
    for start in range(0, Xg.shape[0], chunk):
        pb = truth.pair_density(Xg[start : start + chunk], Yg)
        total += float(np.sum((pb - 1.0) ** 2))
    return math.sqrt(total * cx * cy)


def transfer_matrix(
    est: TransferEstimate, mu: DiscreteMeasure, nu: DiscreteMeasure
) -> np.ndarray:
    """Discrete transfer matrix between two weighted point clouds.

    Entry (m, n) is q(x_m, y_n) * nu_n, i.e. the estimated probability mass
    moved from source atom m to target atom n per unit of source mass.  For
    an estimate fitted with input-marginal constraints the rows sum to one
    up to the smoothing tolerance.

    Parameters
    ----------
    est : TransferEstimate
    mu : DiscreteMeasure
        Source cloud (rows); only its points are used.
    nu : DiscreteMeasure
        Target cloud (columns); weights enter the matrix.

    Returns
    -------
    ndarray, shape (len(mu), len(nu))
    """
    if not est.coupling.constrained:
        warnings.warn(
            "transfer matrix built from an unconstrained fit; "
            "rows are not guaranteed to be normalized",
            stacklevel=2,
        )
    Q = q_matrix(est, mu.points, nu.points)
    return Q * nu.weights[None, :]


@dataclass(frozen=True)
class SpectralResult:
    """Leading singular triplets of a weighted transfer matrix.

    Attributes
    ----------
    singular_values : ndarray, shape (r,)
        Leading singular values, descending.
    right_vectors : ndarray, shape (len(mu), r)
        Source-side vectors, one column per mode, in the weighted geometry.
    left_vectors : ndarray, shape (len(nu), r)
        Target-side vectors.
    right_partitions : ndarray of bool, shape (len(mu), r)
        Sign splits of the source-side vectors.
    left_partitions : ndarray of bool, shape (len(nu), r)
        Sign splits of the target-side vectors.
    """

    singular_values: np.ndarray
    right_vectors: np.ndarray
    left_vectors: np.ndarray
    right_partitions: np.ndarray
    left_partitions: np.ndarray


def svd_cluster(
    transfer: np.ndarray,
    mu_weights: np.ndarray,
    nu_weights: np.ndarray,
    n_modes: int = 4,
) -> SpectralResult:
    """Weighted SVD of a transfer matrix for coherent-set detection.

    The matrix is symmetrized to B = D_mu^{1/2} T D_nu^{-1/2} and its leading
    singular vectors are mapped back to functions on the two clouds.  Each
    mode's sign is fixed so the source-side vector has nonnegative mean (the
    pairing with its target-side vector is preserved).  Zero crossings of
    the vectors then propose two-set partitions of each cloud.

    Parameters
    ----------
    transfer : ndarray, shape (m, n)
    mu_weights, nu_weights : ndarray
        Strictly positive weights of the source and target atoms.
    n_modes : int
        Number of leading modes to keep.

    Returns
    -------
    SpectralResult
    """
    transfer = np.asarray(transfer, dtype=float)
    mu_weights = np.asarray(mu_weights, dtype=float)
    nu_weights = np.asarray(nu_weights, dtype=float)
    m, n = transfer.shape
    if mu_weights.shape != (m,) or nu_weights.shape != (n,):
        raise ValueError("weight shapes do not match the transfer matrix")
    if np.any(mu_weights <= 0) or np.any(nu_weights <= 0):
        raise ValueError("weights must be strictly positive")
    r = int(n_modes)
    if not 1 <= r <= min(m, n):
        raise ValueError("n_modes must lie in [1, min(m, n)]")
    sqrt_mu = np.sqrt(mu_weights)
    sqrt_nu = np.sqrt(nu_weights)
    B = transfer * (sqrt_mu[:, None] / sqrt_nu[None, :])
    U, s, Vt = np.linalg.svd(B, full_matrices=False)
    right = U[:, :r] / sqrt_mu[:, None]
    left = Vt[:r].T / sqrt_nu[:, None]
    for k in range(r):
        if right[:, k].mean() < 0.0:
            right[:, k] = -right[:, k]
            left[:, k] = -left[:, k]
    return SpectralResult(
        singular_values=s[:r],
        right_vectors=right,
        left_vectors=left,
        right_partitions=right >= 0.0,
        left_partitions=left >= 0.0,
    )


def _golden_min(f, a: float, b: float, rel_tol: float) -> float:
    """Golden-section minimizer of a unimodal scalar function on [a, b]."""
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > rel_tol * max(abs(a), abs(b)):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def parametric_fit(
    ds: BatchDataset,
    family,
    theta_grid: np.ndarray,
    rel_tol: float = 1e-4,
):
    """Fit a scalar model parameter by minimizing the batch functional.

    Evaluates the functional over ``theta_grid``, then refines around the
    best grid point by golden-section search (assuming local unimodality)
    until the bracket shrinks below ``rel_tol`` in relative width.

    Parameters
    ----------
    ds : BatchDataset
    family : callable
        Maps a parameter value to a vectorized pair density
        ``(X, Y) -> (len(X), len(Y)) array``.
    theta_grid : ndarray
        Strictly increasing parameter values, at least two.
    rel_tol : float
        Relative bracket width at which refinement stops.

    Returns
    -------
    theta_hat : float
        Refined minimizer.
    profile : ndarray, shape (len(theta_grid), 2)
        Columns (theta, functional value) over the grid.
    """
    theta_grid = np.asarray(theta_grid, dtype=float)
    if theta_grid.ndim != 1 or theta_grid.size < 2:
        raise ValueError("theta_grid must be a 1-d array with at least two values")
    if np.any(np.diff(theta_grid) <= 0):
        raise ValueError("theta_grid must be strictly increasing")

    def objective(theta: float) -> float:
        return eval_J_batches(family(theta), ds)

    values = np.array([objective(t) for t in theta_grid])
    best = int(np.argmin(values))
    profile = np.column_stack([theta_grid, values])
    if best == 0 or best == theta_grid.size - 1:
        warnings.warn(
            "profile minimum lies on the grid boundary; widen theta_grid",
            stacklevel=2,
        )
        return float(theta_grid[best]), profile
    theta_hat = _golden_min(
        objective, float(theta_grid[best - 1]), float(theta_grid[best + 1]), rel_tol
    )
    return float(theta_hat), profile


def write_profile_csv(path, profile: np.ndarray) -> None:
    """Write a (theta, value) profile as a two-column CSV file."""
    profile = np.asarray(profile, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["theta", "objective"])
        for theta, value in profile:
            writer.writerow([repr(float(theta)), repr(float(value))])
