import numpy as np
import pytest

from statfem_ula.fem_poisson import FemSystem, build_observation, random_observation_points
from statfem_ula.potentials import (
    LinearLikelihood,
    PosteriorPotential,
    PriorPotential,
    SigmoidLikelihood,
    build_preconditioner,
    grad_phi_posterior,
    grad_phi_prior,
    map_estimate,
    posterior_precision,
    sigmoid,
    sigmoid_derivative,
    sigmoid_obs,
)
from statfem_ula.problem import StatFEMProblem
from statfem_ula.samplers import generate_data
from statfem_ula.sparse_core import ConvergenceError, SparseMatrix, cg_solve, extreme_eigs


def central_diff(f, u, rel=1e-6):
    g = np.empty_like(u)
    for i in range(u.size):
        h = rel * (1 + abs(u[i]))
        e = np.zeros_like(u)
        e[i] = h
        g[i] = (f(u + e) - f(u - e)) / (2 * h)
    return g


def scalar_system(a, g, b):
    A = SparseMatrix.from_dense([[a]], symmetric=True)
    return FemSystem(A, np.array([b]), np.array([g]), np.array([g]), 0)


@pytest.fixture(scope="module")
def setting():
    problem = StatFEMProblem(4)
    rng = np.random.default_rng(11)
    system = problem.system(problem.draw_theta(rng))
    obs = build_observation(problem.mesh, random_observation_points(12, rng), 0.01)
    y_lin = generate_data(problem, obs, 5, 1.2, rng)
    y_sig = generate_data(problem, obs, 5, 1.2, rng, sensor=sigmoid)
    return problem, system, obs, y_lin, y_sig


class TestPrior:
    def test_scalar(self):
        p = PriorPotential(scalar_system(2.0, 1.0, 0.0))
        np.testing.assert_allclose(grad_phi_prior(p, np.array([1.0])), [4.0])
        assert p.phi(np.array([1.0])) == pytest.approx(2.0)

    def test_zero_at_deterministic_solution(self, setting):
        _, system, *_ = setting
        p = PriorPotential(system)
        u = cg_solve(system.A, system.b, tol=1e-13)
        assert np.linalg.norm(grad_phi_prior(p, u)) < 1e-8 * np.linalg.norm(system.b)
        assert p.phi(u) == pytest.approx(0.0, abs=1e-20)

    def test_finite_differences(self, setting, rng):
        _, system, *_ = setting
        p = PriorPotential(system)
        for _ in range(10):
            u = system.mean + 0.01 * rng.standard_normal(system.dim)
            fd = central_diff(p.phi, u)
            g = p.grad(u)
            np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-6 * np.abs(g).max())

    def test_nonnegative(self, setting, rng):
        _, system, *_ = setting
        p = PriorPotential(system)
        assert np.all(p.phi(rng.standard_normal((system.dim, 20))) >= 0)

    def test_batched_matches_columns(self, setting, rng):
        _, system, *_ = setting
        p = PriorPotential(system)
        U = rng.standard_normal((system.dim, 4))
        np.testing.assert_allclose(p.grad(U)[:, 2], p.grad(U[:, 2]))
        np.testing.assert_allclose(p.phi(U)[1], p.phi(U[:, 1]))


class TestLikelihoods:
    def test_sigmoid_values(self):
        assert sigmoid(0.05) == pytest.approx(0.05)
        assert sigmoid(1.0) == pytest.approx(0.1, abs=1e-12)
        assert sigmoid(-1.0) < 1e-12
        x = np.linspace(-0.2, 0.3, 11)
        fd = (sigmoid(x + 1e-7) - sigmoid(x - 1e-7)) / 2e-7
        np.testing.assert_allclose(sigmoid_derivative(x), fd, rtol=1e-6, atol=1e-10)

    def test_sigmoid_obs_range(self, setting, rng):
        _, system, obs, _, y_sig = setting
        lik = SigmoidLikelihood(obs, y_sig)
        h = sigmoid_obs(lik, 5 * rng.standard_normal(system.dim))
        assert np.all((h >= 0) & (h <= 0.1))

    def test_no_observations(self, setting, rng):
        _, system, obs, *_ = setting
        p = PriorPotential(system)
        lik = LinearLikelihood(obs, np.zeros((obs.n_points, 0)))
        u = rng.standard_normal(system.dim)
        np.testing.assert_array_equal(grad_phi_posterior(p, lik, u), p.grad(u))

    def test_linear_gradient_zero_at_posterior_mean(self, setting):
        _, system, obs, y, _ = setting
        lik = LinearLikelihood(obs, y)
        P = posterior_precision(system, lik)
        rhs = system.A.T @ (system.G_inv * system.b) + obs.H.T @ y.sum(axis=1) / obs.R_diag
        m = cg_solve(P, rhs, tol=1e-14, max_iter=5000)
        g = grad_phi_posterior(PriorPotential(system), lik, m)
        assert np.linalg.norm(g) < 1e-8 * max(1.0, np.linalg.norm(rhs))

    @pytest.mark.parametrize("kind", ["linear", "sigmoid"])
    def test_posterior_finite_differences(self, setting, rng, kind):
        _, system, obs, y_lin, y_sig = setting
        lik = LinearLikelihood(obs, y_lin) if kind == "linear" else SigmoidLikelihood(obs, y_sig)
        post = PosteriorPotential(PriorPotential(system), lik)
        for _ in range(5):
            u = 1.2 * system.mean + 0.005 * rng.standard_normal(system.dim)
            g = post.grad(u)
            fd = central_diff(post.phi, u)
            np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5 * np.abs(g).max())

    def test_linear_hessian_action(self, setting, rng):
        _, system, obs, y, _ = setting
        lik = LinearLikelihood(obs, y)
        post = PosteriorPotential(PriorPotential(system), lik)
        P = posterior_precision(system, lik)
        u, v = rng.standard_normal(system.dim), rng.standard_normal(system.dim)
        eps = 1e-6
        fd = (post.grad(u + eps * v) - post.grad(u - eps * v)) / (2 * eps)
        np.testing.assert_allclose(P @ v, fd, rtol=1e-6, atol=1e-6 * np.abs(fd).max())
        # data term carries the n_obs factor
        dense = system.precision().todense() + y.shape[1] * obs.H.todense().T @ obs.H.todense() / obs.R_diag
        np.testing.assert_allclose(P.todense(), dense, rtol=1e-12, atol=1e-6)

    def test_data_shape_checked(self, setting):
        _, _, obs, *_ = setting
        with pytest.raises(ValueError):
            LinearLikelihood(obs, np.zeros((obs.n_points + 1, 2)))


class TestMap:
    def test_linear_one_step(self, setting):
        _, system, obs, y, _ = setting
        lik = LinearLikelihood(obs, y)
        u, it = map_estimate(PriorPotential(system), lik, np.zeros(system.dim), full_output=True)
        assert it == 1
        P = posterior_precision(system, lik).todense()
        rhs = system.A.T @ (system.G_inv * system.b) + obs.H.T @ y.sum(axis=1) / obs.R_diag
        np.testing.assert_allclose(u, np.linalg.solve(P, rhs), rtol=1e-6, atol=1e-10)

    def test_prior_only(self, setting):
        _, system, *_ = setting
        u = map_estimate(PriorPotential(system), None, np.zeros(system.dim))
        np.testing.assert_allclose(u, system.mean, rtol=1e-6, atol=1e-10)

    def test_sigmoid_local_optimum(self, rng):
        problem = StatFEMProblem(8)
        obs = build_observation(problem.mesh, random_observation_points(30, rng), 0.01)
        y = generate_data(problem, obs, 10, 1.2, rng, sensor=sigmoid)
        lik = SigmoidLikelihood(obs, y)
        prior = PriorPotential(problem.mean_system)
        u0 = problem.mean_system.mean
        g0 = np.linalg.norm(PosteriorPotential(prior, lik).grad(u0))
        u = map_estimate(prior, lik, u0, tol=1e-8)
        post = PosteriorPotential(prior, lik)
        assert np.linalg.norm(post.grad(u)) <= 1e-8 * (1 + g0)
        f = post.phi(u)
        for _ in range(100):
            assert post.phi(u + 1e-4 * rng.standard_normal(u.size)) > f

    def test_exhaustion_raises(self, rng):
        problem = StatFEMProblem(8)
        obs = build_observation(problem.mesh, random_observation_points(30, rng), 0.01)
        y = generate_data(problem, obs, 10, 1.2, rng, sensor=sigmoid)
        with pytest.raises(ConvergenceError) as info:
            map_estimate(PriorPotential(problem.mean_system), SigmoidLikelihood(obs, y),
                         np.zeros(problem.dim), tol=1e-14, max_iter=1)
        assert info.value.residual > 0


@pytest.fixture(scope="module")
def preconds(setting):
    problem, _, obs, y_lin, y_sig = setting
    sys = problem.mean_system
    lin = LinearLikelihood(obs, y_lin)
    sig = SigmoidLikelihood(obs, y_sig)
    u_star = map_estimate(PriorPotential(sys), sig, sys.mean)
    return {
        "identity": build_preconditioner("identity", sys),
        "prior_mean_theta": build_preconditioner("prior_mean_theta", sys),
        "posterior_mean_theta": build_preconditioner("posterior_mean_theta", sys, lin),
        "gauss_newton_map": build_preconditioner("gauss_newton_map", sys, sig, u_star),
    }


class TestPreconditioners:
    @pytest.mark.parametrize("kind", ["identity", "prior_mean_theta", "posterior_mean_theta", "gauss_newton_map"])
    def test_algebraic_identities(self, preconds, kind, rng):
        pc = preconds[kind]
        d = pc.dim
        for _ in range(20):
            v, w = rng.standard_normal(d), rng.standard_normal(d)
            Mv = pc.apply_M(v)
            scale = np.abs(Mv).max()
            np.testing.assert_allclose(pc.apply_M_inv(Mv), v, atol=1e-8 * np.abs(v).max())
            np.testing.assert_allclose(pc.apply_sqrt(pc.apply_sqrt_t(v)), Mv, atol=1e-8 * scale)
            np.testing.assert_allclose(pc.apply_sqrt_inv(pc.apply_sqrt(w)), w, atol=1e-8 * np.abs(w).max())
            assert w @ Mv == pytest.approx(v @ pc.apply_M(w), rel=1e-8)

    def test_identity_is_identity(self, preconds, rng):
        pc = preconds["identity"]
        v = rng.standard_normal(pc.dim)
        np.testing.assert_array_equal(pc.apply_M(v), v)
        np.testing.assert_array_equal(pc.apply_sqrt(v), v)

    def test_prior_kind_inverts_mean_theta_precision(self, setting):
        problem = setting[0]
        sys = problem.mean_system
        pc = build_preconditioner("prior_mean_theta", sys)
        p = PriorPotential(sys)
        est = extreme_eigs(lambda w: pc.apply_sqrt_t(p.hessian_apply(pc.apply_sqrt(w))), sys.dim, tol=1e-8,
                           solve=lambda w: w)
        assert est.lambda_max == pytest.approx(1.0, rel=1e-6)
        assert est.condition_number == pytest.approx(1.0, rel=1e-5)

    def test_posterior_kind_matches_dense(self, setting, preconds):
        problem, _, obs, y_lin, _ = setting
        P = posterior_precision(problem.mean_system, LinearLikelihood(obs, y_lin)).todense()
        M = np.linalg.inv(P)
        pc = preconds["posterior_mean_theta"]
        np.testing.assert_allclose(pc.apply_M(np.eye(pc.dim)), M, rtol=1e-7, atol=1e-10 * np.abs(M).max())

    def test_errors(self, setting):
        problem = setting[0]
        with pytest.raises(ValueError, match="unknown"):
            build_preconditioner("bogus", problem.mean_system)
        with pytest.raises(ValueError, match="likelihood"):
            build_preconditioner("posterior_mean_theta", problem.mean_system)
        with pytest.raises(ValueError, match="u_star"):
            build_preconditioner("gauss_newton_map", problem.mean_system, LinearLikelihood(setting[2], setting[3]))
