import numpy as np
import pytest

from statfem_ula.fem_poisson import (
    assemble,
    build_mesh,
    build_observation,
    random_observation_points,
    stiffness_matrix,
)
from statfem_ula.problem import StatFEMProblem
from statfem_ula.sparse_core import banded_cholesky


def _dense_reference_stiffness(mesh, theta):
    """Element loop with explicit gradient formulas (independent of the vectorised path)."""
    K = np.zeros((mesh.n_nodes, mesh.n_nodes))
    for tri in mesh.cells:
        p = mesh.nodes[tri]
        T = np.array([p[1] - p[0], p[2] - p[0]]).T
        area = 0.5 * abs(np.linalg.det(T))
        # gradients of barycentric coordinates: rows of [-1 -1; 1 0; 0 1] @ T^{-1}
        grads = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]) @ np.linalg.inv(T)
        k = theta[tri].mean() * area * grads @ grads.T
        K[np.ix_(tri, tri)] += k
    return K


class TestMesh:
    @pytest.mark.parametrize("n, nodes", [(1, 4), (32, 1089), (128, 16641)])
    def test_node_counts(self, n, nodes):
        mesh = build_mesh(n)
        assert mesh.n_nodes == nodes
        assert mesh.n_cells == 2 * n * n

    def test_zero_cells_rejected(self):
        with pytest.raises(ValueError):
            build_mesh(0)

    def test_positive_areas(self):
        mesh = build_mesh(7)
        np.testing.assert_allclose(mesh.areas, 0.5 / 49)
        assert mesh.areas.sum() == pytest.approx(1.0)

    def test_boundary_mask(self):
        mesh = build_mesh(5)
        x, y = mesh.nodes.T
        expected = (x == 0) | (x == 1) | (y == 0) | (y == 1)
        np.testing.assert_array_equal(mesh.boundary_mask, expected)
        assert mesh.boundary_mask.sum() == 4 * 5

    def test_node_ordering(self):
        mesh = build_mesh(4)
        # node (ix, iy) at index ix * 5 + iy
        np.testing.assert_allclose(mesh.nodes[2 * 5 + 3], [0.5, 0.75])


class TestAssembly:
    def test_matches_element_loop(self, rng):
        mesh = build_mesh(3)
        theta = rng.uniform(0.5, 2.0, mesh.n_nodes)
        K = stiffness_matrix(mesh, theta).todense()
        np.testing.assert_allclose(K, _dense_reference_stiffness(mesh, theta), atol=1e-13)

    def test_constant_theta_row_sums_vanish(self):
        mesh = build_mesh(6)
        K = stiffness_matrix(mesh, np.ones(mesh.n_nodes)).todense()
        interior = ~mesh.boundary_mask
        np.testing.assert_allclose(K[interior].sum(axis=1), 0.0, atol=1e-12)

    def test_bilinear_in_theta(self, rng):
        mesh = build_mesh(5)
        t1 = rng.uniform(0.5, 2, mesh.n_nodes)
        t2 = rng.uniform(0.5, 2, mesh.n_nodes)
        K = lambda t: stiffness_matrix(mesh, t).todense()
        np.testing.assert_allclose(K(3.0 * np.ones(mesh.n_nodes)), 3.0 * K(np.ones(mesh.n_nodes)), rtol=1e-13)
        np.testing.assert_allclose(K(t1 + 2 * t2), K(t1) + 2 * K(t2), atol=1e-12)

    def test_lumped_noise_sums_to_beta_squared(self):
        sys = assemble(build_mesh(16), np.ones(289), beta_xi=0.05)
        assert sys.G.sum() == pytest.approx(0.0025, rel=1e-12)
        assert np.all(sys.G > 0)

    def test_boundary_treatment(self, rng):
        mesh = build_mesh(4)
        sys = assemble(mesh, rng.uniform(0.5, 2, mesh.n_nodes))
        A = sys.A.todense()
        bnd = mesh.boundary_mask
        np.testing.assert_array_equal(sys.b[bnd], 0.0)
        np.testing.assert_array_equal(A[bnd][:, ~bnd], 0.0)
        np.testing.assert_array_equal(A[~bnd][:, bnd], 0.0)
        np.testing.assert_array_equal(np.diag(A)[bnd], 1.0)
        np.testing.assert_allclose(A, A.T)

    def test_nonpositive_theta_rejected(self):
        mesh = build_mesh(2)
        theta = np.ones(9)
        theta[4] = 0.0
        with pytest.raises(ValueError, match="positive"):
            assemble(mesh, theta)
        with pytest.raises(ValueError):
            assemble(mesh, np.ones(8))

    def test_spd_for_prior_draws(self, rng):
        problem = StatFEMProblem(8)
        for _ in range(100):
            sys = problem.system(problem.draw_theta(rng))
            banded_cholesky(sys.A, sys.bandwidth)

    def test_self_convergence(self):
        def solve(n):
            mesh = build_mesh(n)
            sys = assemble(mesh, np.ones(mesh.n_nodes))
            return sys.mean.reshape(n + 1, n + 1)

        u8, u16, u32, u64 = (solve(n) for n in (8, 16, 32, 64))
        coarse = np.abs(u16[::2, ::2] - u8).max()
        fine = np.abs(u64[::2, ::2] - u32).max()
        assert fine < coarse


class TestObservation:
    def test_point_at_node(self):
        mesh = build_mesh(4)
        obs = build_observation(mesh, [[0.5, 0.25]], 0.01)
        row = obs.H.todense()[0]
        expected = np.zeros(mesh.n_nodes)
        expected[2 * 5 + 1] = 1.0
        np.testing.assert_allclose(row, expected, atol=1e-15)

    def test_centroid_weights(self):
        mesh = build_mesh(4)
        h = 0.25
        # lower triangle of cell (1, 1): vertices (h,h), (2h,h), (2h,2h)
        c = np.array([[h + 2 * h / 3, h + h / 3]])
        row = build_observation(mesh, c, 0.01).H.todense()[0]
        np.testing.assert_allclose(np.sort(row[row > 0]), [1 / 3] * 3, rtol=1e-12)

    def test_linear_functions_reproduced(self, rng):
        mesh = build_mesh(7)
        pts = random_observation_points(50, rng)
        obs = build_observation(mesh, pts, 0.02)
        g = mesh.nodes[:, 0] + mesh.nodes[:, 1]
        np.testing.assert_allclose(obs.H.csr @ g, pts.sum(axis=1), atol=1e-12)
        g2 = 3 * mesh.nodes[:, 0] - 2 * mesh.nodes[:, 1] + 0.5
        np.testing.assert_allclose(obs.H.csr @ g2, 3 * pts[:, 0] - 2 * pts[:, 1] + 0.5, atol=1e-12)

    def test_row_invariants(self, rng):
        obs = build_observation(build_mesh(9), random_observation_points(40, rng), 0.01)
        H = obs.H.todense()
        assert np.all((H > 0).sum(axis=1) <= 3)
        assert H.min() >= 0 and H.max() <= 1
        np.testing.assert_allclose(H.sum(axis=1), 1.0, rtol=1e-14)
        assert obs.R_diag == pytest.approx(1e-4)
        assert obs.sigma_e == pytest.approx(0.01)

    @pytest.mark.parametrize("pt", [[0.0, 0.5], [0.5, 1.0], [1.2, 0.3], [-0.1, 0.4]])
    def test_boundary_or_outside_rejected(self, pt):
        with pytest.raises(ValueError, match="inside"):
            build_observation(build_mesh(4), [pt], 0.01)

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            build_observation(build_mesh(4), [[0.5, 0.5]], 0.0)
