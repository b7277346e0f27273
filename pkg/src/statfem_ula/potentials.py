"""Potentials, gradients, observation models, preconditioners and the MAP.

Prior potential for fixed theta::

    Phi(u) = 1/2 (A u - b)^T G^{-1} (A u - b),   grad = A^T G^{-1} (A u - b)

Posterior potentials add ``1/2 sum_i (y_i - h(u))^T R^{-1} (y_i - h(u))`` for
``h(u) = H u`` or the saturating sensor ``h(u)_j = S((H u)_j)``. Every
gradient here is a handful of sparse mat-vecs; nothing is solved.

All functions accept either a single state ``u`` of shape ``(d,)`` or a
batch of states stacked as columns, shape ``(d, n)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import expit

from .fem_poisson import FemSystem, ObservationOperator
from .sparse_core import (
    BandedCholesky,
    ConvergenceError,
    SparseMatrix,
    banded_cholesky,
    cg_solve,
    spmv,
)

__all__ = [
    "PriorPotential",
    "PosteriorPotential",
    "LinearLikelihood",
    "SigmoidLikelihood",
    "Preconditioner",
    "PRECONDITIONER_KINDS",
    "grad_phi_prior",
    "grad_phi_posterior",
    "sigmoid",
    "sigmoid_derivative",
    "sigmoid_obs",
    "posterior_precision",
    "map_estimate",
    "build_preconditioner",
]


def _col(v, like):
    return v if np.ndim(like) == 1 else v[:, None]


def _sqnorm(r):
    return np.sum(r * r, axis=0)


class PriorPotential:
    """``Phi_theta`` for one assembled system."""

    def __init__(self, system: FemSystem):
        self.system = system

    @property
    def dim(self):
        return self.system.dim

    def residual(self, u):
        return spmv(self.system.A, u) - _col(self.system.b, u)

    def phi(self, u):
        r = self.residual(u)
        return 0.5 * np.sum(r * r * _col(self.system.G_inv, u), axis=0)

    def grad(self, u):
        s = self.system
        return spmv(s.A.T, _col(s.G_inv, u) * self.residual(u))

    def hessian_apply(self, v):
        s = self.system
        return spmv(s.A.T, _col(s.G_inv, v) * spmv(s.A, v))

    def log_target(self, u):
        return -self.phi(u)


def grad_phi_prior(p: PriorPotential, u):
    """``A^T G^{-1} (A u - b)``: two sparse mat-vecs and a diagonal scaling."""
    return p.grad(u)


def sigmoid(x, sat=0.1, gain=100.0, center=0.05):
    """Saturating sensor ``sat / (1 + exp(-gain (x - center)))``."""
    return sat * expit(gain * (np.asarray(x) - center))


def sigmoid_derivative(x, sat=0.1, gain=100.0, center=0.05):
    s = sigmoid(x, sat, gain, center)
    return gain * s * (1.0 - s / sat)


class _GaussianLikelihood:
    """``1/2 sum_i ||y_i - h(u)||^2 / sigma_e^2`` over the data columns."""

    def __init__(self, obs: ObservationOperator, data):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 1:
            data = data[:, None]
        if data.shape[0] != obs.n_points:
            raise ValueError(f"data rows ({data.shape[0]}) must match observation points ({obs.n_points})")
        self.obs = obs
        self.data = data

    @property
    def n_obs(self):
        return self.data.shape[1]

    @cached_property
    def y_sum(self):
        return self.data.sum(axis=1)

    @cached_property
    def _y_sqsum(self):
        return float(np.sum(self.data**2))

    def _sensor(self, h):
        return h

    def _sensor_derivative(self, h):
        return np.ones_like(h)

    def predict(self, u):
        return self._sensor(spmv(self.obs.H, u))

    def phi(self, u):
        """Negative log-likelihood up to a constant."""
        if self.n_obs == 0:
            return np.zeros(np.shape(u)[1:]) if np.ndim(u) > 1 else 0.0
        pred = self.predict(u)
        ys = _col(self.y_sum, pred)
        total = self._y_sqsum - 2.0 * np.sum(pred * ys, axis=0) + self.n_obs * _sqnorm(pred)
        return 0.5 * total / self.obs.R_diag

    def log_likelihood(self, u):
        return -self.phi(u)

    def grad(self, u):
        """Gradient of :meth:`phi` with respect to ``u``."""
        h = spmv(self.obs.H, u)
        r = (_col(self.y_sum, h) - self.n_obs * self._sensor(h)) / self.obs.R_diag
        return -spmv(self.obs.H.T, self._sensor_derivative(h) * r)

    def jacobian(self, u) -> SparseMatrix:
        """``J(u) = diag(S'(H u)) H``."""
        h = spmv(self.obs.H, u)
        return SparseMatrix.from_scipy(self.obs.H.csr.multiply(self._sensor_derivative(h)[:, None]))

    def gauss_newton_matrix(self, u=None) -> SparseMatrix:
        """``n_obs J^T R^{-1} J`` (``u`` is ignored for the linear model)."""
        J = self.jacobian(np.zeros(self.obs.H.n_cols) if u is None else u).csr
        return SparseMatrix.from_scipy((self.n_obs / self.obs.R_diag) * (J.T @ J), symmetric=True)


class LinearLikelihood(_GaussianLikelihood):
    """``y_i = H u + e``, ``e ~ N(0, sigma_e^2 I)``."""


class SigmoidLikelihood(_GaussianLikelihood):
    """``y_i = S(H u) + e`` with a saturating sigmoid sensor."""

    def __init__(self, obs, data, sat=0.1, gain=100.0, center=0.05):
        super().__init__(obs, data)
        self.sat, self.gain, self.center = sat, gain, center

    def _sensor(self, h):
        return sigmoid(h, self.sat, self.gain, self.center)

    def _sensor_derivative(self, h):
        return sigmoid_derivative(h, self.sat, self.gain, self.center)


def sigmoid_obs(lik: SigmoidLikelihood, u):
    """``H(u)_j = S((H u)_j)``."""
    return lik.predict(u)


class PosteriorPotential:
    """``Phi^y_theta = Phi_theta - log p(y | u)``."""

    def __init__(self, prior: PriorPotential, likelihood):
        self.prior = prior
        self.likelihood = likelihood

    @property
    def system(self):
        return self.prior.system

    @property
    def dim(self):
        return self.prior.dim

    def phi(self, u):
        return self.prior.phi(u) + self.likelihood.phi(u)

    def grad(self, u):
        return self.prior.grad(u) + self.likelihood.grad(u)

    def log_target(self, u):
        return -self.phi(u)


def grad_phi_posterior(p: PriorPotential, lik, u):
    """Prior gradient plus the likelihood gradient summed over observations."""
    g = p.grad(u)
    if lik is None or lik.n_obs == 0:
        return g
    return g + lik.grad(u)


def posterior_precision(system: FemSystem, likelihood=None, u=None) -> SparseMatrix:
    """``A^T G^{-1} A + n_obs J^T R^{-1} J`` (Gauss-Newton at ``u`` if nonlinear)."""
    P = system.precision()
    if likelihood is None or likelihood.n_obs == 0:
        return P
    return SparseMatrix.from_scipy(P.csr + likelihood.gauss_newton_matrix(u).csr, symmetric=True)


def map_estimate(p: PriorPotential, lik, u0, tol=1e-7, max_iter=200, cg_tol=1e-8, full_output=False):
    """Gauss-Newton minimisation of ``Phi^y`` with backtracking.

    Each step solves ``(A^T G^{-1} A + n_obs J^T R^{-1} J) delta = -grad`` by
    CG. Stops when ``||grad|| <= tol * (1 + ||grad(u0)||)``.

    Raises
    ------
    ConvergenceError
        After ``max_iter`` steps; carries the final gradient norm.
    """
    post = PosteriorPotential(p, lik) if lik is not None else p
    u = np.array(u0, dtype=np.float64)
    g = post.grad(u)
    gnorm0 = np.linalg.norm(g)
    target = tol * (1.0 + gnorm0)
    f = post.phi(u)
    for it in range(max_iter + 1):
        gnorm = np.linalg.norm(g)
        if gnorm <= target:
            return (u, it) if full_output else u
        if it == max_iter:
            break
        H = posterior_precision(p.system, lik, u)
        delta = cg_solve(H, -g, tol=cg_tol)
        slope = g @ delta
        step = 1.0
        while True:
            trial = u + step * delta
            f_trial = post.phi(trial)
            if f_trial <= f + 1e-4 * step * slope:
                break
            # decrease below roundoff of f: take the step as is
            if -step * slope < 1e3 * np.finfo(float).eps * abs(f):
                break
            step *= 0.5
            if step < 1e-12:
                raise ConvergenceError(
                    "line search failed in Gauss-Newton", residual=gnorm, iterations=it
                )
        u, f = trial, f_trial
        g = post.grad(u)
    raise ConvergenceError(
        f"Gauss-Newton did not converge in {max_iter} steps (gradient norm {gnorm:.3e})",
        residual=gnorm,
        iterations=max_iter,
    )


PRECONDITIONER_KINDS = ("identity", "prior_mean_theta", "posterior_mean_theta", "gauss_newton_map")


@dataclass(frozen=True, eq=False)
class Preconditioner:
    """SPD preconditioner ``M`` with square root ``S`` (``S S^T = M``).

    * ``identity``: ``M = I``.
    * ``prior_mean_theta``: ``M = A^{-1} G A^{-T}``, ``S = A^{-1} G^{1/2}``,
      using the band factor of the stiffness ``A``.
    * posterior kinds: ``M^{-1} = L L^T`` is a band-factored precision,
      ``S = L^{-T}``.
    """

    kind: str
    dim: int
    factor: BandedCholesky | None = None
    A: SparseMatrix | None = None
    G: np.ndarray | None = None

    @property
    def _stiffness_mode(self):
        return self.A is not None

    def apply_M(self, v):
        if self.kind == "identity":
            return np.array(v, dtype=np.float64, copy=True)
        if self._stiffness_mode:
            return self.factor.solve(_col(self.G, v) * self.factor.solve(v))
        return self.factor.solve(v)

    def apply_sqrt(self, w):
        """``S w``."""
        if self.kind == "identity":
            return np.array(w, dtype=np.float64, copy=True)
        if self._stiffness_mode:
            return self.factor.solve(_col(np.sqrt(self.G), w) * w)
        return self.factor.solve_upper(w)

    def apply_sqrt_t(self, w):
        """``S^T w``."""
        if self.kind == "identity":
            return np.array(w, dtype=np.float64, copy=True)
        if self._stiffness_mode:
            return _col(np.sqrt(self.G), w) * self.factor.solve(w)
        return self.factor.solve_lower(w)

    def apply_sqrt_inv(self, x):
        """``S^{-1} x``."""
        if self.kind == "identity":
            return np.array(x, dtype=np.float64, copy=True)
        if self._stiffness_mode:
            return spmv(self.A, x) / _col(np.sqrt(self.G), x)
        return self.factor.matvec_upper(x)

    def apply_M_inv(self, v):
        if self.kind == "identity":
            return np.array(v, dtype=np.float64, copy=True)
        if self._stiffness_mode:
            return spmv(self.A.T, spmv(self.A, v) / _col(self.G, v))
        return self.factor.matvec_lower(self.factor.matvec_upper(v))


def build_preconditioner(kind, system: FemSystem | None = None, likelihood=None, u_star=None) -> Preconditioner:
    """Build one of :data:`PRECONDITIONER_KINDS`.

    Parameters
    ----------
    kind : str
    system : FemSystem
        System at the anchoring theta (normally the mean-theta system).
    likelihood : LinearLikelihood or SigmoidLikelihood, optional
        Supplies ``H``, ``R`` and ``n_obs`` for the posterior kinds.
    u_star : array, optional
        Linearisation point (MAP) for ``gauss_newton_map``.
    """
    if kind not in PRECONDITIONER_KINDS:
        raise ValueError(f"unknown preconditioner kind {kind!r}; expected one of {PRECONDITIONER_KINDS}")
    if kind == "identity":
        if system is None:
            raise ValueError("identity preconditioner needs the system (for its dimension)")
        return Preconditioner(kind, system.dim)
    if system is None:
        raise ValueError(f"{kind} preconditioner needs a system")
    if kind == "prior_mean_theta":
        return Preconditioner(kind, system.dim, factor=system.factor, A=system.A, G=system.G)
    if likelihood is None:
        raise ValueError(f"{kind} preconditioner needs a likelihood")
    if kind == "gauss_newton_map":
        if u_star is None:
            raise ValueError("gauss_newton_map preconditioner needs u_star")
        prec = posterior_precision(system, likelihood, u_star)
    else:
        prec = posterior_precision(system, likelihood, np.zeros(system.dim))
    return Preconditioner(kind, system.dim, factor=banded_cholesky(prec, 2 * system.bandwidth))
