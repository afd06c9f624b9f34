import math

import cvxpy as cp
import numpy as np
import pytest

from robustsid.bounds import (
    _huber_fit,
    huber_gradient_at_zero,
    lambda_nuc_max,
    lambda_sparse_max,
    nuclear_certificate,
    nullspace_fit,
    penalty_bounds,
    shutoff_gradient,
)
from robustsid.exceptions import DegenerateProblemError, InfeasibleCertificateError
from robustsid.hankel import adjoint_g, apply_g, build_block_hankel
from robustsid.solver import Penalties, RobustProblem, SolveOptions, solve_robust

from conftest import random_operator
from oracles import huber


def corrupted_instance(seed, r=3, s=2, N=12, n_p=2):
    g = np.random.default_rng(seed)
    op, rec, params = random_operator(g, r, s, N, n_p)
    y = rec.filled_outputs()[params.s :]
    y[3, n_p - 1] += 10.0
    return op, y, np.ones(len(y), dtype=bool)


def adjoint_matrix(op):
    """Matrix of ``G*`` assembled from Hankel columns, independent of adjoint_g."""
    T, n_p = op.window_length, op.n_p
    cols = []
    for t in range(T):
        for c in range(n_p):
            e = np.zeros((T, n_p))
            e[t, c] = 1.0
            cols.append((build_block_hankel(e, 0, op.r, op.N) @ op.B_map).ravel())
    return np.array(cols)


class TestSparseBound:
    def test_example(self):
        assert lambda_sparse_max([1.0, -3.0, 2.0]) == 6.0

    def test_zero(self):
        assert lambda_sparse_max(np.zeros(5)) == 0.0

    def test_mask(self):
        obs = np.array([True, False, True])
        assert lambda_sparse_max([1.0, -30.0, 2.0], obs) == 4.0
        with pytest.raises(DegenerateProblemError):
            lambda_sparse_max([1.0, 2.0], np.zeros(2, dtype=bool))

    def test_homogeneous(self, rng):
        y = rng.standard_normal((20, 3))
        assert lambda_sparse_max(2.5 * y) == 2.5 * lambda_sparse_max(y)


class TestHuberGradient:
    @pytest.mark.parametrize("y,lam,out", [(1.0, 4.0, 2.0), (3.0, 4.0, 4.0), (-3.0, 4.0, -4.0)])
    def test_examples(self, y, lam, out):
        assert huber_gradient_at_zero([y], lam).item() == out

    def test_unobserved_zero(self):
        g = huber_gradient_at_zero([1.0, 5.0], 4.0, np.array([True, False]))
        np.testing.assert_array_equal(g.ravel(), [2.0, 0.0])

    def test_is_negated_gradient(self, rng):
        y = rng.uniform(-4, 4, 30)
        lam, h = 3.0, 1e-6
        fd = (huber(-h - y, lam) - huber(h - y, lam)) / (2 * h)
        np.testing.assert_allclose(huber_gradient_at_zero(y, lam).ravel(), fd, rtol=1e-6, atol=1e-8)


class TestHuberFit:
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_conic_solver(self, seed):
        g = np.random.default_rng(seed)
        basis = np.linalg.qr(g.standard_normal((15, 5)))[0]
        target = g.standard_normal(15)
        target[g.integers(0, 15, 3)] += 8 * g.choice([-1, 1], 3)
        lam = g.uniform(0.5, 4)
        c = _huber_fit(basis, target, lam)
        v = cp.Variable(5)
        ref = cp.Problem(cp.Minimize(cp.sum(cp.huber(basis @ v - target, lam / 2)))).solve(solver=cp.CLARABEL)
        assert huber(basis @ c - target, lam).sum() <= ref * (1 + 1e-7) + 1e-9

    def test_nullspace_fit_is_in_nullspace(self):
        op, y, obs = corrupted_instance(0)
        y_lim = nullspace_fit(op, y, 3.0, obs)
        assert np.abs(apply_g(op, y_lim)).max() <= 1e-10 * np.abs(apply_g(op, y)).max()


class TestNuclearBound:
    def test_zero_data(self):
        op, y, obs = corrupted_instance(0)
        assert lambda_nuc_max(op, np.zeros_like(y), 1.0, obs) == 0.0

    @pytest.mark.parametrize("seed", [0, 1])
    def test_matches_conic_solver(self, seed):
        op, y, obs = corrupted_instance(seed, r=2, s=1, N=8, n_p=1)
        lam_s = 3.0
        _, g = shutoff_gradient(op, y, lam_s, obs)
        W = cp.Variable(op.output_shape)
        A = adjoint_matrix(op)
        prob = cp.Problem(cp.Minimize(cp.sigma_max(W)), [A @ cp.vec(W, order="C") == g.ravel()])
        ref = prob.solve(solver=cp.CLARABEL)
        assert lambda_nuc_max(op, y, lam_s, obs) == pytest.approx(ref, rel=1e-5)

    @pytest.mark.parametrize("seed", range(3))
    def test_certificate_validity(self, seed):
        op, y, obs = corrupted_instance(seed)
        cert = lambda_nuc_max(op, y, 3.0, obs, certificate=True)
        _, g = shutoff_gradient(op, y, 3.0, obs)
        assert cert.converged
        assert np.linalg.norm(cert.W, 2) == pytest.approx(cert.value, rel=1e-6)
        assert np.abs(adjoint_g(op, cert.W) - g).max() <= 1e-6 * np.abs(g).max()
        assert cert.lower <= cert.value <= cert.lower * (1 + 1e-6)

    def test_strict_form_is_generically_infeasible(self):
        # the nullspace of G contains the direct-feedthrough responses, so the
        # gradient at y = 0 generically leaves the range of the adjoint
        op, y, obs = corrupted_instance(0)
        with pytest.raises(InfeasibleCertificateError) as info:
            lambda_nuc_max(op, y, 3.0, obs, strict=True)
        assert info.value.residual > 0

    def test_strict_form_feasible_in_range(self):
        op, y, obs = corrupted_instance(1)
        R = op.gram_split.range_vecs
        y = R @ (R.T @ y)
        lam_s = lambda_sparse_max(y, obs)
        assert lambda_nuc_max(op, y, lam_s, obs, strict=True) == pytest.approx(
            lambda_nuc_max(op, y, lam_s, obs), rel=1e-6
        )

    def test_target_early_exit(self):
        op, y, obs = corrupted_instance(2)
        _, g = shutoff_gradient(op, y, 3.0, obs)
        full = nuclear_certificate(op, g)
        low = nuclear_certificate(op, g, target=0.5 * full.lower)
        assert low.lower > 0.5 * full.lower and low.iterations <= full.iterations

    def test_subgradient_finite_differences(self, rng):
        op, _, _ = corrupted_instance(3)
        y = rng.standard_normal((op.window_length, op.n_p))
        U, s, Vt = np.linalg.svd(apply_g(op, y), full_matrices=False)
        assert np.min(np.diff(s[::-1])) > 1e-6 and s[-1] > 1e-6
        grad = adjoint_g(op, U @ Vt)
        h = 1e-6
        for _ in range(5):
            d = rng.standard_normal(y.shape)
            nuc = lambda z: np.linalg.svd(apply_g(op, z), compute_uv=False).sum()
            fd = (nuc(y + h * d) - nuc(y - h * d)) / (2 * h)
            assert fd == pytest.approx(np.sum(grad * d), rel=1e-4)

    @pytest.mark.parametrize("seed", range(3))
    def test_bisection_against_solver(self, seed):
        op, y, obs = corrupted_instance(seed)
        lam_s = 3.0
        lam_n = lambda_nuc_max(op, y, lam_s, obs)
        scale = np.abs(apply_g(op, y)).max()
        opts = SolveOptions(shutoff_check=False, max_iter=50000, tol_abs=1e-9, tol_rel=1e-8)
        above = solve_robust(RobustProblem(op, y, obs, Penalties(1.01 * lam_n, lam_s)), opts)
        below = solve_robust(RobustProblem(op, y, obs, Penalties(0.9 * lam_n, lam_s)), opts)
        assert above.converged and below.converged
        assert np.abs(apply_g(op, above.y_hat)).max() <= 1e-6 * scale
        assert np.abs(apply_g(op, below.y_hat)).max() >= 1e-3 * scale


class TestPenaltyBounds:
    def test_zero_data(self):
        op, y, obs = corrupted_instance(0)
        b = penalty_bounds(op, np.zeros_like(y), obs)
        assert (b.lambda_sparse_max, b.lambda_nuc_max) == (0.0, 0.0)

    def test_composition(self):
        op, y, obs = corrupted_instance(1)
        b = penalty_bounds(op, y, obs)
        assert b.lambda_sparse_used == b.lambda_sparse_max == lambda_sparse_max(y, obs)
        assert b.lambda_nuc_max == pytest.approx(lambda_nuc_max(op, y, b.lambda_sparse_max, obs), rel=1e-6)
        assert set(b.as_dict()) == {"lambda_sparse_max", "lambda_nuc_max", "lambda_sparse_used"}

    def test_scaling(self):
        op, y, obs = corrupted_instance(2)
        a, b = penalty_bounds(op, y, obs), penalty_bounds(op, 3.0 * y, obs)
        assert b.lambda_sparse_max == 3.0 * a.lambda_sparse_max
        # at lambda_sparse_max the fit is quadratic, so the nuclear bound scales too
        assert b.lambda_nuc_max == pytest.approx(3.0 * a.lambda_nuc_max, rel=1e-5)

    def test_inf_sparse_weight(self):
        op, y, obs = corrupted_instance(3)
        lam = lambda_sparse_max(y, obs)
        assert lambda_nuc_max(op, y, math.inf, obs) == pytest.approx(lambda_nuc_max(op, y, lam, obs), rel=1e-6)
