"""P1 finite elements for -div(theta grad u) = f + xi on the unit square.

Structured right-triangle mesh, homogeneous Dirichlet conditions applied by
symmetric elimination (boundary rows/columns zeroed, unit diagonal), and a
lumped forcing covariance ``G = beta^2 * rowsum(M)``.

Node ``(ix, iy)`` sits at ``(ix / n, iy / n)`` and has index
``ix * (n + 1) + iy`` (row-major in ``(ix, iy)``, y fastest).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .sparse_core import BandedCholesky, SparseMatrix, banded_cholesky

__all__ = [
    "Mesh",
    "FemSystem",
    "ObservationOperator",
    "build_mesh",
    "assemble",
    "stiffness_matrix",
    "build_observation",
    "random_observation_points",
]


@dataclass(frozen=True, eq=False)
class Mesh:
    """Unit-square triangulation; each cell split bottom-left to top-right."""

    n_cells_per_side: int
    nodes: np.ndarray
    cells: np.ndarray
    boundary_mask: np.ndarray

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_cells(self):
        return self.cells.shape[0]

    @property
    def grid_coords_1d(self):
        return np.linspace(0.0, 1.0, self.n_cells_per_side + 1)

    @property
    def bandwidth(self):
        """Half bandwidth of the stiffness matrix in natural ordering."""
        return self.n_cells_per_side + 2

    @cached_property
    def areas(self):
        p = self.nodes[self.cells]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def basis_gradients(self):
        """Constant gradients of the three local basis functions, (n_cells, 3, 2)."""
        p = self.nodes[self.cells]
        x, y = p[..., 0], p[..., 1]
        two_area = 2.0 * self.areas
        grads = np.empty(p.shape)
        for a in range(3):
            b, c = (a + 1) % 3, (a + 2) % 3
            grads[:, a, 0] = (y[:, b] - y[:, c]) / two_area
            grads[:, a, 1] = (x[:, c] - x[:, b]) / two_area
        return grads

    @cached_property
    def _pattern(self):
        # Fixed CSR pattern of the stiffness matrix plus the scatter map from
        # the (cell, a, b) local entries to CSR value slots.
        n = self.n_nodes
        rows = np.repeat(self.cells, 3, axis=1).ravel()
        cols = np.tile(self.cells, (1, 3)).ravel()
        key = rows * n + cols
        uniq, scatter = np.unique(key, return_inverse=True)
        urows, ucols = uniq // n, uniq % n
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.add.at(offsets, urows + 1, 1)
        offsets = np.cumsum(offsets)
        bnd = self.boundary_mask
        touches_bnd = bnd[urows] | bnd[ucols]
        bnd_diag = bnd[urows] & (urows == ucols)
        return offsets, ucols, scatter, touches_bnd, bnd_diag

    @cached_property
    def _unit_local_stiffness(self):
        g = self.basis_gradients
        return self.areas[:, None, None] * np.einsum("eai,ebi->eab", g, g)


def build_mesh(n_cells_per_side: int) -> Mesh:
    """Regular triangulation of the unit square with ``2 n^2`` triangles."""
    n = int(n_cells_per_side)
    if n < 1:
        raise ValueError("n_cells_per_side must be at least 1")
    ix, iy = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    nodes = np.column_stack([ix.ravel() / n, iy.ravel() / n])

    ci, cj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    ci, cj = ci.ravel(), cj.ravel()
    n00 = ci * (n + 1) + cj
    n10 = (ci + 1) * (n + 1) + cj
    n01 = n00 + 1
    n11 = n10 + 1
    lower = np.column_stack([n00, n10, n11])
    upper = np.column_stack([n00, n11, n01])
    cells = np.empty((2 * n * n, 3), dtype=np.int64)
    cells[0::2] = lower
    cells[1::2] = upper

    ix, iy = ix.ravel(), iy.ravel()
    boundary = (ix == 0) | (ix == n) | (iy == 0) | (iy == n)
    return Mesh(n, nodes, cells, boundary)


def _check_theta(mesh, theta_nodes):
    theta = np.asarray(theta_nodes, dtype=np.float64)
    if theta.shape != (mesh.n_nodes,):
        raise ValueError(f"theta must have one value per node ({mesh.n_nodes}), got {theta.shape}")
    if not np.all(np.isfinite(theta)) or np.any(theta <= 0):
        raise ValueError("theta must be strictly positive and finite (ellipticity)")
    return theta


def _stiffness_values(mesh, theta):
    theta_cell = theta[mesh.cells].mean(axis=1)
    local = theta_cell[:, None, None] * mesh._unit_local_stiffness
    offsets, cols, scatter, _, _ = mesh._pattern
    vals = np.bincount(scatter, weights=local.ravel(), minlength=cols.size)
    return offsets, cols, vals


def stiffness_matrix(mesh: Mesh, theta_nodes) -> SparseMatrix:
    """Stiffness matrix before boundary conditions.

    ``theta`` is evaluated per element at the centroid (mean of its three
    nodal values), so the matrix is linear in the nodal values.
    """
    theta = _check_theta(mesh, theta_nodes)
    offsets, cols, vals = _stiffness_values(mesh, theta)
    return SparseMatrix(mesh.n_nodes, mesh.n_nodes, offsets, cols, vals, symmetric=True)


@dataclass(frozen=True, eq=False)
class FemSystem:
    """Discrete conditional prior ``u | theta ~ N(A^{-1} b, A^{-1} G A^{-T})``.

    ``A`` has the Dirichlet rows/columns eliminated (unit diagonal); its CSR
    pattern keeps the eliminated slots as explicit zeros.
    """

    A: SparseMatrix
    b: np.ndarray
    G: np.ndarray
    mass_lumped: np.ndarray
    bandwidth: int

    @property
    def dim(self):
        return self.b.size

    @cached_property
    def G_inv(self):
        return 1.0 / self.G

    @cached_property
    def G_sqrt(self):
        return np.sqrt(self.G)

    @cached_property
    def factor(self) -> BandedCholesky:
        """Band Cholesky factor of ``A``."""
        return banded_cholesky(self.A, self.bandwidth)

    @cached_property
    def mean(self):
        """``A^{-1} b``."""
        return self.factor.solve(self.b)

    def precision(self) -> SparseMatrix:
        """``A^T G^{-1} A``."""
        csr = self.A.csr
        return SparseMatrix.from_scipy(csr.T @ csr.multiply(self.G_inv[:, None]).tocsr(), symmetric=True)


def assemble(mesh: Mesh, theta_nodes, f_const=1.0, beta_xi=0.05) -> FemSystem:
    """Assemble ``A_theta``, ``b`` and the lumped ``G`` on ``mesh``.

    Parameters
    ----------
    theta_nodes : array
        Positive diffusion coefficient at every node.
    f_const : float
        Constant deterministic forcing.
    beta_xi : float
        Amplitude of the white-noise forcing; ``G = beta^2 * rowsum(M)``.
    """
    theta = _check_theta(mesh, theta_nodes)
    offsets, cols, vals = _stiffness_values(mesh, theta)
    _, _, _, touches_bnd, bnd_diag = mesh._pattern
    vals[touches_bnd] = 0.0
    vals[bnd_diag] = 1.0
    A = SparseMatrix(mesh.n_nodes, mesh.n_nodes, offsets, cols, vals, symmetric=True)

    # consistent P1 mass rows sum to area / 3 per element node
    lumped = np.bincount(
        mesh.cells.ravel(), weights=np.repeat(mesh.areas / 3.0, 3), minlength=mesh.n_nodes
    )
    b = f_const * lumped
    b[mesh.boundary_mask] = 0.0
    G = beta_xi**2 * lumped
    return FemSystem(A, b, G, lumped, mesh.bandwidth)


@dataclass(frozen=True, eq=False)
class ObservationOperator:
    """Linear interpolation of nodal values at fixed points, ``y = H u + e``."""

    H: SparseMatrix
    points: np.ndarray
    R_diag: float

    @property
    def n_points(self):
        return self.H.n_rows

    @property
    def sigma_e(self):
        return float(np.sqrt(self.R_diag))


def _locate(mesh, pts):
    """Containing triangle vertices and barycentric weights for each point."""
    n = mesh.n_cells_per_side
    sx = pts[:, 0] * n
    sy = pts[:, 1] * n
    ix = np.clip(np.floor(sx).astype(np.int64), 0, n - 1)
    iy = np.clip(np.floor(sy).astype(np.int64), 0, n - 1)
    s = sx - ix
    t = sy - iy
    n00 = ix * (n + 1) + iy
    n10 = n00 + (n + 1)
    n11 = n10 + 1
    n01 = n00 + 1
    lower = s >= t
    verts = np.where(lower[:, None], np.column_stack([n00, n10, n11]), np.column_stack([n00, n11, n01]))
    w = np.where(
        lower[:, None],
        np.column_stack([1.0 - s, s - t, t]),
        np.column_stack([1.0 - t, s, t - s]),
    )
    return verts, w


def build_observation(mesh: Mesh, points, sigma_e: float) -> ObservationOperator:
    """Observation operator holding barycentric weights of each point.

    Raises
    ------
    ValueError
        If a point is outside the open unit square or ``sigma_e <= 0``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[1] != 2:
        raise ValueError("points must be an (n, 2) array")
    if not sigma_e > 0:
        raise ValueError("sigma_e must be positive")
    inside = (pts > 0.0) & (pts < 1.0)
    if not np.all(inside):
        bad = int(np.flatnonzero(~inside.all(axis=1))[0])
        raise ValueError(f"observation point {bad} {pts[bad]} is not strictly inside the domain")
    verts, w = _locate(mesh, pts)
    w = np.clip(w, 0.0, 1.0)
    w /= w.sum(axis=1, keepdims=True)
    rows = np.repeat(np.arange(pts.shape[0]), 3)
    keep = w.ravel() > 0.0
    H = SparseMatrix.from_coo(
        rows[keep], verts.ravel()[keep], w.ravel()[keep], shape=(pts.shape[0], mesh.n_nodes)
    )
    return ObservationOperator(H, pts, float(sigma_e) ** 2)


def random_observation_points(d_y: int, rng, low=0.05, high=0.95) -> np.ndarray:
    """``d_y`` sensor locations drawn uniformly from ``(low, high)^2``."""
    return rng.uniform(low, high, size=(d_y, 2))
