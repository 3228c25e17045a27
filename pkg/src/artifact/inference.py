"""Batched datasets, anchor selection, and discrete problem assembly.

A dataset is N batches of M sample pairs whose within-batch pairing has
been destroyed by an unknown permutation.  The batch-averaged functional

    J(q) = -(1/(NM)) sum_i sum_j log( (1/M) sum_m q(x^i_m, y^i_j) )

scores a candidate joint density q against such data.  Restricting q to a
tensor kernel family q(x, y) = sum_{k,l} k_x(x, xk) k_y(y, yl) xi_{k,l}
turns its minimization into a KL fitting problem in the coefficient
matrix xi, assembled here in factored (batch-Kronecker) form.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from itertools import permutations
from typing import Callable, Optional

import numpy as np

from artifact.entropic_kernel import KernelMatrix
from artifact.errors import AssemblyError, EvaluationError, UnsupportedError
from artifact.geometry import DiscreteMeasure, MetricSpace, cost_matrix, pairwise_dist
from artifact.seeding import stream
from artifact.solver import KLInstance, Partition
from artifact.systems import System, sample_batch, system_spaces

__all__ = [
    "BatchDataset",
    "Coupling",
    "InferenceProblem",
    "generate_dataset",
    "pooled_measures",
    "furthest_point_indices",
    "furthest_point_subsample",
    "nn_weights",
    "uniform_anchors",
    "coverage_anchors",
    "assemble_problem",
    "eval_J_empirical",
    "eval_J_batches",
    "eval_J_permutation",
    "save_dataset",
    "load_dataset",
]

_COLSUM_TOL = 1e-6
_PERMUTATION_LIMIT = 8


@dataclass(frozen=True)
class BatchDataset:
    """N batches of M sample pairs with scrambled within-batch pairing.

    ``xs[i, m]`` and ``ys[i, j]`` are the m-th input and j-th output point
    of batch i; the order of the ys carries no pairing information.
    """

    system: str
    seed: int
    xs: np.ndarray
    ys: np.ndarray
    space_x: MetricSpace
    space_y: MetricSpace

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        ys = np.asarray(self.ys, dtype=float)
        if xs.ndim != 3 or ys.ndim != 3:
            raise ValueError("xs and ys must have shape (N, M, dim)")
        if xs.shape[:2] != ys.shape[:2]:
            raise ValueError("xs and ys must agree in batch count and size")
        if xs.shape[2] != self.space_x.dim or ys.shape[2] != self.space_y.dim:
            raise ValueError("point dimensions do not match the spaces")
        xs.setflags(write=False)
        ys.setflags(write=False)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @property
    def n_batches(self) -> int:
        return self.xs.shape[0]

    @property
    def batch_size(self) -> int:
        return self.xs.shape[1]


def generate_dataset(system: System, n_batches: int, batch_size: int, seed: int) -> BatchDataset:
    """Draw a dataset of ``n_batches`` batches of ``batch_size`` pairs.

    Each batch uses its own named child stream of ``seed`` and its ys are
    shuffled by a uniformly random permutation from the same stream, so
    individual batches are reproducible regardless of how many batches are
    drawn.
    """
    if n_batches < 1 or batch_size < 1:
        raise ValueError("n_batches and batch_size must be positive")
    space_x, space_y = system_spaces(system)
    xs = np.empty((n_batches, batch_size, space_x.dim))
    ys = np.empty((n_batches, batch_size, space_y.dim))
    for i in range(n_batches):
        rng = stream(seed, "dataset", i)
        bx, by = sample_batch(system, batch_size, rng)
        perm = rng.permutation(batch_size)
        xs[i] = bx
        ys[i] = by[perm]
    return BatchDataset(
        system=system.describe(),
        seed=int(seed),
        xs=xs,
        ys=ys,
        space_x=space_x,
        space_y=space_y,
    )


def pooled_measures(ds: BatchDataset) -> tuple[DiscreteMeasure, DiscreteMeasure]:
    """Empirical measures of all inputs and all outputs, pooled across
    batches with uniform weights 1/(NM).  Duplicates are kept."""
    nm = ds.n_batches * ds.batch_size
    mu = DiscreteMeasure.uniform(ds.space_x, ds.xs.reshape(nm, -1))
    nu = DiscreteMeasure.uniform(ds.space_y, ds.ys.reshape(nm, -1))
    return mu, nu


def furthest_point_indices(
    space: MetricSpace, points, k: int, seed: int, tag: str = "x"
) -> np.ndarray:
    """Greedy max-min landmark selection; returns indices in pick order.

    The first landmark is drawn uniformly from the cloud (seeded); each
    later one maximizes the distance to everything already selected, ties
    resolved toward the lowest index.
    """
    pts = np.asarray(points, dtype=float)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= {n}, got k={k}")
    rng = stream(seed, "subsample", tag, "fps-start")
    first = int(rng.integers(n))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = first
    min_dist = pairwise_dist(space, pts, pts[first][None, :])[:, 0]
    for t in range(1, k):
        nxt = int(np.argmax(min_dist))
        chosen[t] = nxt
        np.minimum(
            min_dist,
            pairwise_dist(space, pts, pts[nxt][None, :])[:, 0],
            out=min_dist,
        )
    return chosen


def furthest_point_subsample(
    space: MetricSpace, points, k: int, seed: int, tag: str = "x"
) -> np.ndarray:
    """Landmark points chosen by :func:`furthest_point_indices`."""
    pts = np.asarray(points, dtype=float)
    return pts[furthest_point_indices(space, pts, k, seed, tag)]


def nn_weights(space: MetricSpace, anchors, cloud) -> np.ndarray:
    """Anchor weights proportional to nearest-neighbor cell counts.

    Each cloud point votes for its nearest anchor (lowest index on ties);
    anchors with empty cells receive a floor weight of 1/(10 |cloud|)
    before the final normalization, keeping all weights strictly positive.
    """
    anchors = np.asarray(anchors, dtype=float)
    cloud = np.asarray(cloud, dtype=float)
    nearest = np.argmin(cost_matrix(space, cloud, anchors), axis=1)
    counts = np.bincount(nearest, minlength=anchors.shape[0]).astype(float)
    w = counts / cloud.shape[0]
    w[w == 0.0] = 1.0 / (10.0 * cloud.shape[0])
    return w / w.sum()


def uniform_anchors(space: MetricSpace, cloud, k: int, seed: int, tag: str = "x") -> DiscreteMeasure:
    """Anchors drawn uniformly with replacement from the cloud, weighted
    uniformly."""
    pts = np.asarray(cloud, dtype=float)
    if k < 1:
        raise ValueError("k must be positive")
    rng = stream(seed, "subsample", tag)
    idx = rng.integers(0, pts.shape[0], size=k)
    return DiscreteMeasure(space, pts[idx], np.full(k, 1.0 / k))


def coverage_anchors(
    space: MetricSpace, cloud, k: int, seed: int, tag: str = "x"
) -> DiscreteMeasure:
    """Greedy max-min landmarks weighted by nearest-neighbor counts."""
    pts = np.asarray(cloud, dtype=float)
    sel = furthest_point_subsample(space, pts, k, seed, tag)
    return DiscreteMeasure(space, sel, nn_weights(space, sel, pts))


@dataclass(frozen=True)
class Coupling:
    """Coefficient matrix of a tensor-kernel density estimate.

    ``xi[k, l]`` weighs the product of x-kernel k and y-kernel l;
    nonnegative with total mass one.  When ``constrained`` the rows sum to
    the x-anchor weights, which pins the x-marginal of the estimate.
    """

    xi: np.ndarray
    constrained: bool = False

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        if xi.ndim != 2:
            raise ValueError("xi must be a matrix")
        if np.any(xi < 0):
            raise ValueError("xi must be nonnegative")
        if abs(xi.sum() - 1.0) > 1e-8:
            raise ValueError(f"xi must have total mass one, got {xi.sum()!r}")
        xi = xi.copy()
        xi.setflags(write=False)
        object.__setattr__(self, "xi", xi)


class BatchKroneckerOp:
    """The discrete design operator in factored form.

    Row (i, j) of the full matrix is
    ``(1/(N M^2)) sum_m Kx[(i,m), :] (x) Ky[(i,j), :]``; the factored
    apply uses the per-batch pooled x-kernel rows G and never materializes
    the (NM) x (K L) array.  Coefficient vectors are the C-order
    flattening of the (K, L) matrix xi.
    """

    def __init__(self, G: np.ndarray, ky_rows: np.ndarray):
        n, m, L = ky_rows.shape
        k = G.shape[1]
        if G.shape[0] != n:
            raise ValueError("G and ky_rows disagree on the batch count")
        self.G = G
        self.ky_rows = ky_rows
        self.scale = 1.0 / (n * m * m)
        self.shape = (n * m, k * L)
        self._n, self._m, self._k, self._L = n, m, k, L

    def matvec(self, x: np.ndarray) -> np.ndarray:
        xi = np.asarray(x).reshape(self._k, self._L)
        H = self.G @ xi
        out = np.einsum("il,ijl->ij", H, self.ky_rows)
        return (self.scale * out).reshape(-1)

    def rmatvec(self, w: np.ndarray) -> np.ndarray:
        W = np.einsum("ij,ijl->il", np.asarray(w).reshape(self._n, self._m), self.ky_rows)
        return (self.scale * (self.G.T @ W)).reshape(-1)

    def dense(self) -> np.ndarray:
        """Materialize the full matrix (small problems only)."""
        A = np.einsum("ik,ijl->ijkl", self.G, self.ky_rows)
        return (self.scale * A).reshape(self.shape)


@dataclass(frozen=True)
class InferenceProblem:
    """Discrete KL fitting problem for the coefficient matrix.

    ``op`` applies the factored design operator; ``b`` is the uniform data
    vector 1/(NM); the optional partition encodes the x-marginal
    constraint (each coefficient row must sum to its anchor weight).  The
    recorded unit column sum refers to the idealized fully-pooled system
    and feeds the linear term of the solver objective, which then equals
    the batch-averaged functional of the induced density estimate exactly.
    """

    op: BatchKroneckerOp
    b: np.ndarray
    partition: Optional[Partition]
    n_x_anchors: int
    n_y_anchors: int

    def to_instance(self) -> KLInstance:
        return KLInstance(self.op, self.b, partition=self.partition, col_sum=1.0)

    def coupling_from(self, x: np.ndarray) -> Coupling:
        xi = np.asarray(x, dtype=float).reshape(self.n_x_anchors, self.n_y_anchors)
        return Coupling(xi, constrained=self.partition is not None)


def assemble_problem(
    kx: KernelMatrix,
    ky: KernelMatrix,
    ds: BatchDataset,
    constrained: bool = False,
    mu_tilde: np.ndarray | None = None,
) -> InferenceProblem:
    """Build the discrete problem from kernel rows on the pooled samples.

    ``kx`` and ``ky`` must hold kernel values on the pooled xs and ys (in
    batch-major order).  Build-time check: the pooled column averages of
    both kernels must satisfy the product normalization
    ``max |kappa_x (x) kappa_y - 1| <= 1e-6``, which is what makes the
    idealized design columns sum to one; a violation signals unconverged
    transport potentials and raises ``AssemblyError``.
    """
    n, m = ds.n_batches, ds.batch_size
    nm = n * m
    if kx.values.shape[0] != nm or ky.values.shape[0] != nm:
        raise ValueError("kernel rows must cover all pooled sample points")
    kappa_x = kx.values.mean(axis=0)
    kappa_y = ky.values.mean(axis=0)
    worst = max(
        kappa_x.max() * kappa_y.max() - 1.0,
        1.0 - kappa_x.min() * kappa_y.min(),
    )
    if worst > _COLSUM_TOL:
        raise AssemblyError(
            f"pooled kernel normalization off by {worst:.3e} (> {_COLSUM_TOL:g}); "
            "re-solve the transport problems to a tighter tolerance"
        )
    K = kx.values.shape[1]
    L = ky.values.shape[1]
    G = kx.values.reshape(n, m, K).sum(axis=1)
    op = BatchKroneckerOp(G, ky.values.reshape(n, m, L))
    b = np.full(nm, 1.0 / nm)
    partition = None
    if constrained:
        targets = np.asarray(mu_tilde, dtype=float) if mu_tilde is not None else kx.col_weights
        if targets.shape[0] != K:
            raise ValueError("mu_tilde must have one entry per x-anchor")
        labels = np.arange(K * L, dtype=np.int64) // L
        partition = Partition(labels, targets)
    return InferenceProblem(
        op=op, b=b, partition=partition, n_x_anchors=K, n_y_anchors=L
    )


def eval_J_empirical(q_eval: Callable, ds: BatchDataset) -> float:
    """Batch-averaged negative log functional of a pointwise density.

    ``q_eval(x, y)`` is called on single points.  The inner batch average
    must be positive everywhere, otherwise ``EvaluationError`` is raised.
    Sums are compensated (exact), so the value is invariant under
    reordering within and across batches.
    """
    n, m = ds.n_batches, ds.batch_size
    terms = []
    for i in range(n):
        for j in range(m):
            y = ds.ys[i, j]
            inner = math.fsum(q_eval(ds.xs[i, mm], y) for mm in range(m)) / m
            if not inner > 0.0 or not math.isfinite(inner):
                raise EvaluationError(
                    f"inner average {inner!r} at batch {i}, output {j} is not "
                    "positive; the candidate density vanishes on the data"
                )
            terms.append(math.log(inner))
    return -math.fsum(terms) / (n * m)


def eval_J_batches(pair_density: Callable, ds: BatchDataset) -> float:
    """Vectorized variant of :func:`eval_J_empirical`.

    ``pair_density(X, Y)`` must return the density on the product of two
    point arrays as an (n, m) matrix.  Used by parameter scans where the
    pointwise protocol would dominate the runtime.
    """
    n, m = ds.n_batches, ds.batch_size
    terms = []
    for i in range(n):
        D = pair_density(ds.xs[i], ds.ys[i])
        inner = D.mean(axis=0)
        if not (inner.min() > 0.0 and np.all(np.isfinite(inner))):
            raise EvaluationError(
                f"nonpositive inner average in batch {i}; the candidate "
                "density vanishes on the data"
            )
        terms.extend(np.log(inner).tolist())
    return -math.fsum(terms) / (n * m)


def eval_J_permutation(q_eval: Callable, ds: BatchDataset) -> float:
    """Permutation-marginalized negative log-likelihood of the dataset.

    Averages the likelihood over all M! pairings per batch (the exact
    matching-marginalized objective), feasible only for small batches;
    batch sizes above 8 are refused.
    """
    n, m = ds.n_batches, ds.batch_size
    if m > _PERMUTATION_LIMIT:
        raise UnsupportedError(
            f"batch size {m} exceeds the permutation budget ({_PERMUTATION_LIMIT})"
        )
    perms = np.array(list(permutations(range(m))), dtype=np.intp)
    fact = float(math.factorial(m))
    cols = np.arange(m, dtype=np.intp)
    terms = []
    for i in range(n):
        B = np.empty((m, m))
        for mm in range(m):
            for j in range(m):
                B[mm, j] = q_eval(ds.xs[i, mm], ds.ys[i, j])
        if np.any(B < 0) or not np.all(np.isfinite(B)):
            raise EvaluationError(f"invalid density values in batch {i}")
        total = B[perms, cols].prod(axis=1).sum()
        if not total > 0.0:
            raise EvaluationError(
                f"all pairings of batch {i} have zero likelihood"
            )
        terms.append(math.log(total / fact))
    return -math.fsum(terms) / n


def save_dataset(ds: BatchDataset, path) -> None:
    """Serialize a dataset to JSON."""
    payload = {
        "system": ds.system,
        "seed": ds.seed,
        "n_batches": ds.n_batches,
        "batch_size": ds.batch_size,
        "dim_x": ds.space_x.dim,
        "dim_y": ds.space_y.dim,
        "bounds_x": ds.space_x.bounds.tolist(),
        "bounds_y": ds.space_y.bounds.tolist(),
        "periodic_x": ds.space_x.periodic.tolist(),
        "periodic_y": ds.space_y.periodic.tolist(),
        "batches": [
            {"xs": ds.xs[i].tolist(), "ys": ds.ys[i].tolist()}
            for i in range(ds.n_batches)
        ],
    }
    with open(path, "w", encoding="utf8") as fh:
        json.dump(payload, fh)


def load_dataset(path) -> BatchDataset:
    """Inverse of :func:`save_dataset`, with shape validation."""
    with open(path, encoding="utf8") as fh:
        payload = json.load(fh)
    space_x = MetricSpace(
        np.asarray(payload["bounds_x"], dtype=float),
        np.asarray(payload["periodic_x"], dtype=bool),
    )
    space_y = MetricSpace(
        np.asarray(payload["bounds_y"], dtype=float),
        np.asarray(payload["periodic_y"], dtype=bool),
    )
    n, m = payload["n_batches"], payload["batch_size"]
    xs = np.asarray([b["xs"] for b in payload["batches"]], dtype=float)
    ys = np.asarray([b["ys"] for b in payload["batches"]], dtype=float)
    if xs.shape != (n, m, space_x.dim) or ys.shape != (n, m, space_y.dim):
        raise ValueError("batch payload does not match the declared shape")
    return BatchDataset(
        system=payload["system"],
        seed=int(payload["seed"]),
        xs=xs,
        ys=ys,
        space_x=space_x,
        space_y=space_y,
    )
