"""Multiplicative solvers for KL-divergence fitting problems.

Given a nonnegative matrix ``A`` with (near-)constant column sums and a
positive target vector ``b``, the solvers minimize

    F(x) = sum_i b_i log(b_i / (A x)_i) - sum_i b_i + c * sum_j x_j

over the probability simplex (unconstrained variant) or over a product of
scaled simplices prescribed by a partition of the coordinates (constrained
variant).  Updates are multiplicative, preserve positivity, keep iterates
exactly feasible, and descend a majorizing surrogate, so the objective
trace is monotone up to round-off.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from artifact.errors import DegenerateInstanceError, NumericalError

__all__ = [
    "Partition",
    "KLInstance",
    "SolverState",
    "kl_div",
    "emml_run",
    "cemml_run",
    "kkt_residual",
    "write_trace_csv",
]

_UNDERFLOW_FLOOR = 1e-300
_COLSUM_CHECK_TOL = 1e-6
# coordinates below this fraction of the largest one count as vanished in
# the optimality check; multiplicative iterations drive dropped coordinates
# to zero only linearly, so at the float64 objective plateau they typically
# sit around 1e-10 relative rather than at exact zero
_SUPPORT_CUTOFF = 1e-8


def kl_div(p, q) -> float:
    """Generalized Kullback-Leibler divergence between nonnegative vectors.

    ``sum p log(p/q) - sum p + sum q`` with the conventions
    ``0 log 0 = 0`` and a value of ``+inf`` whenever some ``q_i = 0 < p_i``.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("p and q must have the same shape")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("kl_div arguments must be nonnegative")
    pos = p > 0
    if np.any(q[pos] == 0):
        return float("inf")
    terms = p[pos] * np.log(p[pos] / q[pos])
    return float(terms.sum() - p.sum() + q.sum())


class _DenseOp:
    """Adapter giving a dense matrix the minimal operator interface."""

    def __init__(self, A: np.ndarray):
        self.A = A
        self.shape = A.shape

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.A @ x

    def rmatvec(self, w: np.ndarray) -> np.ndarray:
        return self.A.T @ w


def _as_operator(A):
    if isinstance(A, np.ndarray):
        return _DenseOp(A)
    if hasattr(A, "matvec") and hasattr(A, "rmatvec") and hasattr(A, "shape"):
        return A
    raise TypeError("A must be a dense array or expose matvec/rmatvec/shape")


@dataclass(frozen=True)
class Partition:
    """Partition of the coordinates into cells with prescribed cell masses.

    ``labels[j]`` is the cell index of coordinate ``j``; ``targets[l]`` is
    the required sum of the coordinates in cell ``l``.  Every cell must be
    nonempty and every target positive.
    """

    labels: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        targets = np.asarray(self.targets, dtype=float)
        if labels.ndim != 1 or targets.ndim != 1:
            raise ValueError("labels and targets must be one-dimensional")
        n_cells = targets.shape[0]
        if labels.size == 0 or n_cells == 0:
            raise ValueError("partition must be nonempty")
        if labels.min() < 0 or labels.max() >= n_cells:
            raise ValueError("labels must index into targets")
        if np.any(np.bincount(labels, minlength=n_cells) == 0):
            raise ValueError("every cell must contain at least one coordinate")
        if np.any(targets <= 0) or not np.all(np.isfinite(targets)):
            raise ValueError("targets must be positive and finite")
        labels.setflags(write=False)
        targets.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "targets", targets)

    @property
    def n_cells(self) -> int:
        return self.targets.shape[0]

    def cell_sums(self, x: np.ndarray) -> np.ndarray:
        return np.bincount(self.labels, weights=x, minlength=self.n_cells)


@dataclass
class KLInstance:
    """One KL fitting problem.

    Parameters
    ----------
    A : ndarray or operator
        Nonnegative matrix, dense or anything with
        ``matvec``/``rmatvec``/``shape``.
    b : ndarray
        Nonnegative data vector.  Zero entries (and their rows, for dense
        ``A``) are dropped at construction; they cannot affect the fit.
    partition : Partition, optional
        Coordinate cells with target masses, for the constrained solver.
    col_sum : float, optional
        The constant column sum of ``A``, used in the linear term of the
        objective.  Dense instances validate it (and default to the mean
        column sum); operator instances must declare it.
    """

    A: object
    b: np.ndarray
    partition: Optional[Partition] = None
    col_sum: Optional[float] = None
    op: object = field(init=False, repr=False)

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if np.any(b < 0) or not np.all(np.isfinite(b)):
            raise ValueError("b must be nonnegative and finite")
        dense = isinstance(self.A, np.ndarray)
        if dense:
            A = np.asarray(self.A, dtype=float)
            if A.ndim != 2 or A.shape[0] != b.shape[0]:
                raise ValueError("A and b have incompatible shapes")
            if np.any(A < 0):
                raise ValueError("A must be nonnegative")
            # the declared constant refers to the full matrix; rows paired
            # with b_i = 0 still feed the linear term of the objective,
            # which keeps it equal to the KL divergence of the full system
            col_sums = A.sum(axis=0)
            if np.any(col_sums == 0):
                raise ValueError("A must not contain an all-zero column")
            declared = self.col_sum if self.col_sum is not None else float(col_sums.mean())
            if np.abs(col_sums - declared).max() > _COLSUM_CHECK_TOL * max(1.0, declared):
                raise ValueError(
                    "column sums deviate from the declared constant "
                    f"{declared!r} by {np.abs(col_sums - declared).max():.3e}"
                )
            keep = b > 0
            if not keep.all():
                A = A[keep]
                b = b[keep]
            if A.shape[0] == 0:
                raise ValueError("b has no positive entries")
            self.A = A
            self.col_sum = declared
        else:
            if self.col_sum is None:
                raise ValueError("operator instances must declare col_sum")
            if np.any(b == 0):
                raise ValueError("operator instances require strictly positive b")
        self.b = b
        self.op = _as_operator(self.A)
        if self.partition is not None and self.partition.labels.shape[0] != self.op.shape[1]:
            raise ValueError("partition labels must cover every coordinate")

    @property
    def n_rows(self) -> int:
        return self.op.shape[0]

    @property
    def n_cols(self) -> int:
        return self.op.shape[1]

    def objective(self, x: np.ndarray, Ax: np.ndarray | None = None) -> float:
        """The KL objective ``F`` at ``x`` (uses the declared column sum)."""
        if Ax is None:
            Ax = self.op.matvec(x)
        b = self.b
        return float(
            b @ np.log(b / Ax) - b.sum() + self.col_sum * x.sum()
        )


@dataclass
class SolverState:
    """Result of a solver run.

    ``objective_trace[r]`` is the objective at iterate ``r`` (the initial
    point included); ``step_norms[r]`` and ``constraint_trace[r]`` describe
    the update producing iterate ``r`` (zero / initial violation at r=0).
    ``last_residual`` is the final relative objective decrease for the
    unconstrained solver and the final constraint violation for the
    constrained one.
    """

    x: np.ndarray
    iteration: int
    objective_trace: np.ndarray
    constraint_trace: np.ndarray
    step_norms: np.ndarray
    last_residual: float
    converged: bool


def _check_start(x0: np.ndarray, n: int) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape[0] != n:
        raise ValueError(f"x0 must have {n} entries")
    if np.any(x0 <= 0) or not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be strictly positive and finite")
    return x0.copy()


def _guard(Ax: np.ndarray, x: np.ndarray, iteration: int) -> None:
    if Ax.min() < _UNDERFLOW_FLOOR:
        raise NumericalError(
            f"forward image underflowed below {_UNDERFLOW_FLOOR:g}",
            iteration=iteration,
        )
    if not np.all(np.isfinite(x)):
        raise NumericalError("iterate left the finite range", iteration=iteration)


def emml_run(
    inst: KLInstance,
    x0: np.ndarray | None = None,
    max_iter: int = 50_000,
    tol: float = 1e-10,
) -> SolverState:
    """Simplex-constrained multiplicative KL minimization.

    The update ``x <- x * A^T(bhat / Ax)`` with ``bhat = b / sum(b)`` maps
    any positive vector to the probability simplex and minimizes the
    standard majorizing surrogate there, so the objective is nonincreasing
    along the iteration.  Stops when the relative objective decrease falls
    below ``tol`` or after ``max_iter`` updates.
    """
    if inst.partition is not None:
        raise ValueError("instance has a partition; use the constrained solver")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    n = inst.n_cols
    x = _check_start(x0, n) if x0 is not None else np.full(n, 1.0 / n)
    bhat = inst.b / inst.b.sum()

    trace = []
    steps = [0.0]
    constraint = [abs(x.sum() - 1.0)]
    Ax = inst.op.matvec(x)
    _guard(Ax, x, 0)
    trace.append(inst.objective(x, Ax))
    rel_dec = np.inf
    converged = False
    it = 0
    while it < max_iter:
        u = inst.op.rmatvec(bhat / Ax)
        x_new = x * u
        it += 1
        Ax = inst.op.matvec(x_new)
        _guard(Ax, x_new, it)
        trace.append(inst.objective(x_new, Ax))
        steps.append(float(np.linalg.norm(x_new - x)))
        constraint.append(abs(x_new.sum() - 1.0))
        x = x_new
        rel_dec = (trace[-2] - trace[-1]) / max(1.0, abs(trace[-2]))
        if rel_dec < tol:
            converged = True
            break
    return SolverState(
        x=x,
        iteration=it,
        objective_trace=np.asarray(trace),
        constraint_trace=np.asarray(constraint),
        step_norms=np.asarray(steps),
        last_residual=float(rel_dec),
        converged=converged,
    )


def cemml_run(
    inst: KLInstance,
    x0: np.ndarray | None = None,
    max_iter: int = 50_000,
    tol: float = 1e-10,
) -> SolverState:
    """Cell-constrained multiplicative KL minimization.

    Each sweep rescales every partition cell of the multiplicative update
    by its own multiplier, so all iterates after the first satisfy the
    cell-mass constraints exactly.  At a fixed point the Karush-Kuhn-Tucker
    conditions hold: the back-projected ratio is constant on the support
    of each cell and no larger off it.
    """
    part = inst.partition
    if part is None:
        raise ValueError("instance has no partition; use the unconstrained solver")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    n = inst.n_cols
    labels, targets = part.labels, part.targets
    if x0 is not None:
        x = _check_start(x0, n)
    else:
        cell_sizes = np.bincount(labels, minlength=part.n_cells)
        x = (targets / cell_sizes)[labels]

    trace = []
    steps = [0.0]
    Ax = inst.op.matvec(x)
    _guard(Ax, x, 0)
    trace.append(inst.objective(x, Ax))
    constraint = [float(np.abs(part.cell_sums(x) - targets).max())]
    rel_dec = np.inf
    converged = False
    it = 0
    while it < max_iter:
        u = inst.op.rmatvec(inst.b / Ax)
        s = x * u
        lam = np.bincount(labels, weights=s, minlength=part.n_cells) / targets
        if np.any(lam <= 0.0):
            raise DegenerateInstanceError(
                "a cell multiplier vanished; the instance cannot support "
                "its constraint",
                iteration=it,
            )
        x_new = s / lam[labels]
        it += 1
        Ax = inst.op.matvec(x_new)
        _guard(Ax, x_new, it)
        trace.append(inst.objective(x_new, Ax))
        steps.append(float(np.linalg.norm(x_new - x)))
        constraint.append(float(np.abs(part.cell_sums(x_new) - targets).max()))
        x = x_new
        rel_dec = (trace[-2] - trace[-1]) / max(1.0, abs(trace[-2]))
        if rel_dec < tol:
            converged = True
            break
    return SolverState(
        x=x,
        iteration=it,
        objective_trace=np.asarray(trace),
        constraint_trace=np.asarray(constraint),
        step_norms=np.asarray(steps),
        last_residual=constraint[-1],
        converged=converged,
    )


def kkt_residual(inst: KLInstance, x: np.ndarray) -> float:
    """First-order optimality residual at ``x``.

    Computes ``u = A^T(b / Ax)`` and the per-cell multipliers
    ``lambda_l = (1/y_l) sum_{j in cell l} x_j u_j``; the residual is the
    worst deviation ``|u_j - lambda_l|`` over supported coordinates and
    the worst positive part ``u_j - lambda_l`` over vanishing ones,
    normalized by ``max(1, |lambda|_max)``.  Zero (up to round-off) at a
    constrained minimizer.
    """
    x = np.asarray(x, dtype=float)
    if inst.partition is not None:
        labels, targets = inst.partition.labels, inst.partition.targets
        n_cells = inst.partition.n_cells
    else:
        labels = np.zeros(inst.n_cols, dtype=np.int64)
        targets = np.array([x.sum()])
        n_cells = 1
    Ax = inst.op.matvec(x)
    u = inst.op.rmatvec(inst.b / Ax)
    lam = np.bincount(labels, weights=x * u, minlength=n_cells) / targets
    lam_j = lam[labels]
    supported = x > _SUPPORT_CUTOFF * max(x.max(), _UNDERFLOW_FLOOR)
    res = 0.0
    if supported.any():
        res = float(np.abs(u[supported] - lam_j[supported]).max())
    if (~supported).any():
        res = max(res, float(np.maximum(u[~supported] - lam_j[~supported], 0.0).max()))
    return res / max(1.0, float(np.abs(lam).max()))


def write_trace_csv(state: SolverState, path) -> None:
    """Write the iteration trace as CSV.

    Columns: iteration, kl_objective, constraint_violation, step_norm.
    """
    with open(path, "w", newline="", encoding="utf8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "kl_objective", "constraint_violation", "step_norm"])
        for r in range(state.objective_trace.shape[0]):
            writer.writerow(
                [
                    r,
                    repr(float(state.objective_trace[r])),
                    repr(float(state.constraint_trace[r])),
                    repr(float(state.step_norms[r])),
                ]
            )
