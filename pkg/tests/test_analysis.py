"""Tests for density evaluation, L2 metrics, transfer matrices, and fitting."""

import csv
import math

import numpy as np
import pytest
from scipy import integrate

from artifact.analysis import (
    SpectralResult,
    TransferEstimate,
    l2_baseline,
    l2_error,
    parametric_fit,
    q_eval,
    q_matrix,
    svd_cluster,
    transfer_matrix,
    write_profile_csv,
)
from artifact.entropic_kernel import kernel_matrix, sinkhorn
from artifact.errors import UnsupportedError
from artifact.geometry import DiscreteMeasure, unit_torus
from artifact.inference import (
    BatchDataset,
    Coupling,
    assemble_problem,
    generate_dataset,
    pooled_measures,
    uniform_anchors,
)
from artifact.solver import cemml_run
from artifact.systems import DoubleGyre, TorusMixture, truth, wrapped_normal_pdf


@pytest.fixture(scope="module")
def fitted():
    """Small constrained fit reused across tests."""
    ds = generate_dataset(TorusMixture(sigma=0.1), 6, 4, seed=60)
    mu, nu = pooled_measures(ds)
    ax = uniform_anchors(ds.space_x, mu.points, 6, seed=1, tag="x")
    ay = uniform_anchors(ds.space_y, nu.points, 7, seed=1, tag="y")
    pot_x = sinkhorn(mu, ax, epsilon=0.05, tol=1e-11)
    pot_y = sinkhorn(nu, ay, epsilon=0.05, tol=1e-11)
    kx = kernel_matrix(pot_x)
    ky = kernel_matrix(pot_y)
    prob = assemble_problem(kx, ky, ds, constrained=True)
    state = cemml_run(prob.to_instance(), tol=1e-12, max_iter=20_000)
    est = TransferEstimate(prob.coupling_from(state.x), pot_x, pot_y)
    return ds, mu, nu, pot_x, pot_y, est


def independence_estimate(pot_x, pot_y):
    xi = np.outer(pot_x.anchor.weights, pot_y.anchor.weights)
    return TransferEstimate(Coupling(xi), pot_x, pot_y)


class TestQEval:
    def test_independence_coupling_is_flat(self, fitted):
        # xi = outer(anchor weights) makes q the product of two kernel
        # expansions that each integrate to one at any point
        _, _, _, pot_x, pot_y, _ = fitted
        est = independence_estimate(pot_x, pot_y)
        rng = np.random.default_rng(3)
        Q = q_matrix(est, rng.random((40, 1)), rng.random((40, 1)))
        assert np.max(np.abs(Q - 1.0)) < 1e-10

    def test_single_coefficient_factorizes(self, fitted):
        _, _, _, pot_x, pot_y, _ = fitted
        xi = np.zeros((6, 7))
        xi[2, 4] = 1.0
        est = TransferEstimate(Coupling(xi), pot_x, pot_y)
        rng = np.random.default_rng(4)
        X, Y = rng.random((5, 1)), rng.random((5, 1))
        kx = kernel_matrix(pot_x, X).values
        ky = kernel_matrix(pot_y, Y).values
        assert np.allclose(q_matrix(est, X, Y), np.outer(kx[:, 2], ky[:, 4]), rtol=1e-13)

    def test_scalar_matches_matrix(self, fitted):
        *_, est = fitted
        x, y = np.array([0.37]), np.array([0.81])
        assert q_eval(est, x, y) == q_matrix(est, x[None], y[None])[0, 0]

    def test_shape_mismatch_rejected(self, fitted):
        _, _, _, pot_x, pot_y, _ = fitted
        with pytest.raises(ValueError, match="anchor"):
            TransferEstimate(Coupling(np.full((3, 3), 1.0 / 9.0)), pot_x, pot_y)


class TestL2:
    def test_flat_estimate_error_equals_baseline(self, fitted):
        _, _, _, pot_x, pot_y, _ = fitted
        est = independence_estimate(pot_x, pot_y)
        tr = truth(TorusMixture(sigma=0.1))
        err = l2_error(est, tr, resolution=128)
        base = l2_baseline(tr, resolution=128)
        assert err == pytest.approx(base, rel=1e-7)

    def test_baseline_matches_quadrature_oracle(self):
        # the pair density depends only on y - x, so the squared L2
        # distance from 1 reduces to a single displacement integral
        sys = TorusMixture(sigma=0.1, shifts=(0.0, 0.3), weights=(0.5, 0.5))

        def rho(u):
            return 0.5 * wrapped_normal_pdf(np.array([u]), 0.1)[0] + 0.5 * (
                wrapped_normal_pdf(np.array([u - 0.3]), 0.1)[0]
            )

        oracle, _ = integrate.quad(lambda u: (rho(u) - 1.0) ** 2, 0.0, 1.0, limit=200)
        assert l2_baseline(truth(sys), resolution=256) == pytest.approx(
            math.sqrt(oracle), rel=1e-3
        )

    def test_fitted_estimate_beats_flat(self, fitted):
        *_, est = fitted
        tr = truth(TorusMixture(sigma=0.1))
        assert l2_error(est, tr, resolution=128) < l2_baseline(tr, resolution=128)

    def test_no_density_raises(self, fitted):
        *_, est = fitted
        with pytest.raises(UnsupportedError):
            l2_error(est, truth(DoubleGyre()))
        with pytest.raises(UnsupportedError):
            l2_baseline(truth(DoubleGyre()))


class TestTransferMatrix:
    def test_rows_sum_to_one_for_constrained_fit(self, fitted):
        _, mu, nu, _, _, est = fitted
        T = transfer_matrix(est, mu, nu)
        assert T.shape == (24, 24)
        assert np.max(np.abs(T.sum(axis=1) - 1.0)) < 1e-6

    def test_rows_sum_to_one_at_fresh_points(self, fitted):
        _, _, nu, _, _, est = fitted
        rng = np.random.default_rng(5)
        fresh = DiscreteMeasure.uniform(unit_torus(1), rng.random((50, 1)))
        T = transfer_matrix(est, fresh, nu)
        assert np.max(np.abs(T.sum(axis=1) - 1.0)) < 1e-6

    def test_entries_follow_density(self, fitted):
        _, mu, nu, _, _, est = fitted
        T = transfer_matrix(est, mu, nu)
        Q = q_matrix(est, mu.points, nu.points)
        assert np.allclose(T, Q * nu.weights[None, :], rtol=1e-14)

    def test_unconstrained_warns(self, fitted):
        _, mu, nu, pot_x, pot_y, est = fitted
        free = TransferEstimate(
            Coupling(est.coupling.xi, constrained=False), pot_x, pot_y
        )
        with pytest.warns(UserWarning, match="unconstrained"):
            transfer_matrix(free, mu, nu)


class TestSvdCluster:
    def test_block_matrix_oracle(self):
        # symmetric two-block transfer: eigenpairs known in closed form
        a, b = 0.4, 0.1
        T = np.array(
            [[a, a, b, b], [a, a, b, b], [b, b, a, a], [b, b, a, a]]
        )
        w = np.full(4, 0.25)
        res = svd_cluster(T, w, w, n_modes=2)
        assert res.singular_values == pytest.approx([1.0, 0.6], abs=1e-12)
        assert res.right_vectors[:, 0] == pytest.approx(np.ones(4), abs=1e-10)
        v = res.right_vectors[:, 1]
        target = np.array([1.0, 1.0, -1.0, -1.0])
        assert min(np.abs(v - target).max(), np.abs(v + target).max()) < 1e-10
        part = res.right_partitions[:, 1]
        assert np.array_equal(part, [True, True, False, False]) or np.array_equal(
            part, [False, False, True, True]
        )

    def test_rank_one_flat_transfer(self):
        rng = np.random.default_rng(6)
        nu_w = rng.dirichlet(np.ones(6))
        mu_w = rng.dirichlet(np.ones(5))
        T = np.tile(nu_w, (5, 1))  # q = 1 everywhere
        res = svd_cluster(T, mu_w, nu_w, n_modes=3)
        assert res.singular_values[0] == pytest.approx(1.0, abs=1e-12)
        assert np.all(res.singular_values[1:] < 1e-12)
        assert res.right_vectors[:, 0] == pytest.approx(np.ones(5), abs=1e-10)
        assert res.left_vectors[:, 0] == pytest.approx(np.ones(6), abs=1e-10)

    def test_leading_value_near_one_for_fit(self, fitted):
        _, mu, nu, _, _, est = fitted
        T = transfer_matrix(est, mu, nu)
        res = svd_cluster(T, mu.weights, nu.weights, n_modes=2)
        # rows summing to one forces sigma_1 >= 1 exactly; the excess above
        # one reflects the unconstrained output marginal of a small fit
        assert res.singular_values[0] >= 1.0 - 1e-9
        assert res.singular_values[0] == pytest.approx(1.0, abs=2e-2)
        assert res.singular_values[1] <= res.singular_values[0] + 1e-12

    def test_validation(self):
        T = np.full((3, 3), 1.0 / 3.0)
        w = np.full(3, 1.0 / 3.0)
        with pytest.raises(ValueError, match="weight"):
            svd_cluster(T, w[:2], w)
        with pytest.raises(ValueError, match="positive"):
            svd_cluster(T, np.array([0.5, 0.5, 0.0]), w)
        with pytest.raises(ValueError, match="n_modes"):
            svd_cluster(T, w, w, n_modes=5)


def wrapped_family(theta):
    def pair_density(X, Y):
        d = Y[None, :, 0] - X[:, None, 0]
        return wrapped_normal_pdf(d, theta)

    return pair_density


class TestParametricFit:
    def test_single_pair_closed_form_minimizer(self):
        # one observed displacement u: -log of a centered normal in u is
        # minimized over the scale at theta = |u| (wrapping negligible)
        space = unit_torus(1)
        ds = BatchDataset(
            "manual", 0, np.array([[[0.2]]]), np.array([[[0.3]]]), space, space
        )
        grid = np.linspace(0.02, 0.4, 20)
        theta_hat, profile = parametric_fit(ds, wrapped_family, grid)
        assert theta_hat == pytest.approx(0.1, abs=2e-4)
        assert profile.shape == (20, 2)
        assert np.array_equal(profile[:, 0], grid)

    def test_recovers_generator_scale(self):
        sys = TorusMixture(sigma=0.2, shifts=(0.0,), weights=(1.0,))
        ds = generate_dataset(sys, 1500, 3, seed=61)
        grid = np.geomspace(0.05, 0.8, 9)
        theta_hat, _ = parametric_fit(ds, wrapped_family, grid)
        assert theta_hat == pytest.approx(0.2, rel=0.1)

    def test_boundary_minimum_warns(self):
        space = unit_torus(1)
        ds = BatchDataset(
            "manual", 0, np.array([[[0.2]]]), np.array([[[0.3]]]), space, space
        )
        with pytest.warns(UserWarning, match="boundary"):
            theta_hat, _ = parametric_fit(ds, wrapped_family, np.array([0.5, 0.6, 0.7]))
        assert theta_hat == 0.5

    def test_grid_validation(self):
        space = unit_torus(1)
        ds = BatchDataset(
            "manual", 0, np.array([[[0.2]]]), np.array([[[0.3]]]), space, space
        )
        with pytest.raises(ValueError):
            parametric_fit(ds, wrapped_family, np.array([0.1]))
        with pytest.raises(ValueError):
            parametric_fit(ds, wrapped_family, np.array([0.2, 0.1]))

    def test_profile_csv_round_trip(self, tmp_path):
        profile = np.array([[0.1, -0.5], [0.2, -0.75], [0.3, -0.6]])
        path = tmp_path / "profile.csv"
        write_profile_csv(path, profile)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["theta", "objective"]
        back = np.array([[float(v) for v in row] for row in rows[1:]])
        assert np.array_equal(back, profile)
