"""MCMC kernels and the outer theta / inner u sampling loop.

Kernels
-------
* :func:`ula_step` -- (preconditioned) unadjusted Langevin,
  ``u <- u - eta M grad + sqrt(2 eta) S z``.
* :func:`mala_step` -- the same proposal with a Metropolis-Hastings
  correction evaluated in log space.
* :func:`pcn_step` -- prior-reversible Crank-Nicolson proposal, accepted on
  the likelihood ratio alone.
* exact Gaussian draws from the conditional prior / linear posterior.

:func:`run_algorithm1` draws ``theta_k`` from its GP prior at every outer
step, re-assembles ``A_theta`` and runs ``n_inner`` kernel steps warm-started
from the previous outer sample.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .fem_poisson import FemSystem
from .potentials import (
    LinearLikelihood,
    PosteriorPotential,
    Preconditioner,
    PriorPotential,
    build_preconditioner,
    posterior_precision,
)
from .problem import StatFEMProblem
from .sparse_core import banded_cholesky, extreme_eigs, max_eig, spmv

logger = logging.getLogger(__name__)

__all__ = [
    "DivergenceError",
    "ChainState",
    "SamplerConfig",
    "ChainRecord",
    "chain_streams",
    "ula_step",
    "mala_step",
    "mala_log_proposal",
    "mala_log_accept",
    "pcn_step",
    "exact_prior_conditional_sample",
    "exact_posterior_conditional_sample",
    "GaussianPosterior",
    "adapt_stepsize",
    "generate_data",
    "make_potential",
    "initial_stepsize",
    "precision_extremes",
    "auto_ula_stepsize",
    "run_algorithm1",
    "exact_marginal_samples",
]

KERNELS = ("ula", "mala", "pcn")


class DivergenceError(FloatingPointError):
    """A chain produced non-finite values."""

    def __init__(self, message, outer=None, inner=None):
        super().__init__(message)
        self.outer = outer
        self.inner = inner


@dataclass
class ChainState:
    """Current point with its cached log-target and potential gradient."""

    u: np.ndarray
    log_target: float
    grad: np.ndarray | None = None
    theta: object = None

    @classmethod
    def at(cls, u, potential, theta=None):
        u = np.asarray(u, dtype=np.float64)
        return cls(u, float(potential.log_target(u)), potential.grad(u), theta)


@dataclass(frozen=True)
class SamplerConfig:
    """Kernel settings for one chain.

    ``eta`` is the Langevin stepsize; for ``kernel="pcn"`` the adapted
    quantity is ``pcn_beta`` instead.
    """

    eta: float = 1e-2
    n_inner: int = 10
    preconditioner: str = "identity"
    kernel: str = "ula"
    target_accept: float = 0.5
    pcn_beta: float = 0.1
    n_warmup: int = 0
    adapt_batch: int = 50
    refactor_per_theta: bool = False

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.n_inner < 1:
            raise ValueError("n_inner must be at least 1")
        if not 0 < self.pcn_beta <= 1:
            raise ValueError("pcn_beta must lie in (0, 1]")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}; expected one of {KERNELS}")
        if self.adapt_batch < 50:
            raise ValueError("adapt_batch must be at least 50 decisions")


@dataclass
class ChainRecord:
    """Outer samples of one chain.

    ``theta_seeds[k]`` regenerates ``theta_k`` through
    ``np.random.Generator(np.random.Philox(theta_seeds[k]))``.
    """

    samples: np.ndarray
    theta_seeds: np.ndarray
    log_target: np.ndarray
    accept_rate: float | None = None
    eta: float | None = None
    eta_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    metadata: dict = field(default_factory=dict)

    @property
    def n_samples(self):
        return self.samples.shape[0]

    @property
    def dim(self):
        return self.samples.shape[1]


def chain_streams(seed: int, chain: int = 0):
    """Independent (theta, noise) generators for chain ``chain``.

    Both are counter-based Philox streams derived from ``(seed, chain)``.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(chain),))
    theta_ss, noise_ss = ss.spawn(2)
    return (np.random.Generator(np.random.Philox(theta_ss)),
            np.random.Generator(np.random.Philox(noise_ss)))


def theta_rng(theta_seed):
    return np.random.Generator(np.random.Philox(int(theta_seed)))


def _check_finite(u, outer=None, inner=None):
    if not np.all(np.isfinite(u)):
        where = "" if outer is None else f" at outer step {outer}, inner step {inner}"
        raise DivergenceError(f"non-finite state{where}", outer, inner)


# ---------------------------------------------------------------------------
# kernels


def ula_step(u, potential, precond: Preconditioner, eta, rng, noise=True):
    """One (preconditioned) unadjusted Langevin step.

    ``u`` may be a batch of states stacked as columns.

    Raises
    ------
    DivergenceError
        If the new state is not finite.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    with np.errstate(over="ignore", invalid="ignore"):
        drift = precond.apply_M(potential.grad(u))
        u_new = u - eta * drift
        if noise:
            u_new += np.sqrt(2.0 * eta) * precond.apply_sqrt(rng.standard_normal(np.shape(u)))
    _check_finite(u_new)
    return u_new


def mala_log_proposal(x_to, x_from, grad_from, precond: Preconditioner, eta):
    """``log q(x_to | x_from)`` up to a constant shared by both directions.

    ``q = N(x_from - eta M grad_from, 2 eta M)``.
    """
    r = precond.apply_sqrt_inv(x_to - x_from + eta * precond.apply_M(grad_from))
    return -np.sum(r * r, axis=0) / (4.0 * eta)


def mala_log_accept(current: ChainState, proposal: ChainState, precond, eta):
    """Log acceptance probability ``min(0, log ratio)`` for a MALA move."""
    log_ratio = (
        proposal.log_target
        - current.log_target
        + mala_log_proposal(current.u, proposal.u, proposal.grad, precond, eta)
        - mala_log_proposal(proposal.u, current.u, current.grad, precond, eta)
    )
    return min(0.0, float(log_ratio))


def mala_step(state: ChainState, potential, precond: Preconditioner, eta, rng):
    """One Metropolis-adjusted Langevin step. Returns ``(state, accepted)``."""
    u = state.u
    prop_u = u - eta * precond.apply_M(state.grad)
    prop_u += np.sqrt(2.0 * eta) * precond.apply_sqrt(rng.standard_normal(u.shape))
    log_u = np.log(rng.uniform())
    if not np.all(np.isfinite(prop_u)):
        return state, False
    with np.errstate(over="ignore", invalid="ignore"):
        proposal = ChainState.at(prop_u, potential, state.theta)
    if not np.isfinite(proposal.log_target):
        return state, False
    if log_u < mala_log_accept(state, proposal, precond, eta):
        return proposal, True
    return state, False


def pcn_step(u, system: FemSystem, likelihood, beta, rng, log_lik_u=None):
    """One pCN step for ``p(u | theta, y)`` with prior ``N(A^{-1} b, A^{-1} G A^{-T})``.

    Returns ``(u, accepted, log_likelihood(u))``.
    """
    if not 0 < beta <= 1:
        raise ValueError("beta must lie in (0, 1]")
    mean = system.mean
    z = exact_prior_conditional_sample(system, rng) - mean
    prop = mean + np.sqrt(1.0 - beta**2) * (u - mean) + beta * z
    log_u = np.log(rng.uniform())
    if likelihood is None:
        return prop, True, 0.0
    if log_lik_u is None:
        log_lik_u = float(likelihood.log_likelihood(u))
    log_lik_prop = float(likelihood.log_likelihood(prop))
    if log_u < min(0.0, log_lik_prop - log_lik_u):
        return prop, True, log_lik_prop
    return u, False, log_lik_u


def exact_prior_conditional_sample(system: FemSystem, rng, size=None):
    """``u = A^{-1} (b + G^{1/2} z)``: one band solve per draw.

    With ``size`` the draws are returned as rows of a ``(size, d)`` array.
    """
    if size is None:
        z = rng.standard_normal(system.dim)
        return system.factor.solve(system.b + system.G_sqrt * z)
    z = rng.standard_normal((size, system.dim)).T
    return system.factor.solve(system.b[:, None] + system.G_sqrt[:, None] * z).T


class GaussianPosterior:
    """Conjugate conditional posterior ``N(m, C)`` for a linear likelihood.

    ``C^{-1} = A^T G^{-1} A + n_obs H^T R^{-1} H`` is band factored once,
    ``m = C (A^T G^{-1} b + sum_i H^T R^{-1} y_i)`` and a draw is
    ``m + L^{-T} z``.
    """

    def __init__(self, system: FemSystem, likelihood: LinearLikelihood | None):
        self.system = system
        self.likelihood = likelihood
        prec = posterior_precision(system, likelihood)
        self.precision = prec
        self.factor = banded_cholesky(prec, 2 * system.bandwidth)
        rhs = system.A.T @ (system.G_inv * system.b)
        if likelihood is not None and likelihood.n_obs > 0:
            rhs = rhs + (likelihood.obs.H.T @ likelihood.y_sum) / likelihood.obs.R_diag
        self.mean = self.factor.solve(rhs)

    def sample(self, rng, size=None):
        if size is None:
            return self.mean + self.factor.solve_upper(rng.standard_normal(self.mean.size))
        z = rng.standard_normal((size, self.mean.size)).T
        return (self.mean[:, None] + self.factor.solve_upper(z)).T

    def covariance(self):
        """Dense ``C`` (small problems only)."""
        return self.factor.solve(np.eye(self.mean.size))


def exact_posterior_conditional_sample(system: FemSystem, likelihood, rng, size=None):
    """Exact draw(s) from ``p(u | theta, y)`` for a linear likelihood."""
    return GaussianPosterior(system, likelihood).sample(rng, size)


def adapt_stepsize(accepted, eta, target=0.5):
    """``eta * exp(0.1 (rate - target))`` from a batch of >= 50 accept flags."""
    accepted = np.asarray(accepted, dtype=bool)
    if accepted.size < 50:
        raise ValueError("need a batch of at least 50 accept decisions")
    return eta * np.exp(0.1 * (accepted.mean() - target))


def generate_data(problem: StatFEMProblem, obs, n_obs, scale, rng, sensor=None):
    """Synthetic data ``y`` of shape ``(d_y, n_obs)``.

    Column ``i`` uses a fresh ``theta_i``, an exact conditional prior draw
    ``u_i`` and ``y_i = sensor(H (scale u_i)) + e_i``; ``sensor`` defaults to
    the identity.
    """
    if n_obs < 1:
        raise ValueError("n_obs must be at least 1")
    cols = []
    for _ in range(n_obs):
        system = problem.system(problem.draw_theta(rng))
        u = exact_prior_conditional_sample(system, rng)
        h = obs.H @ (scale * u)
        if sensor is not None:
            h = sensor(h)
        cols.append(h + obs.sigma_e * rng.standard_normal(h.size))
    return np.column_stack(cols)


def exact_marginal_samples(problem: StatFEMProblem, n, rng, likelihood=None):
    """``n`` exact draws of ``theta ~ p(theta)``, ``u ~ p(u | theta[, y])`` (rows)."""
    out = np.empty((n, problem.dim))
    for i in range(n):
        system = problem.system(problem.draw_theta(rng))
        if likelihood is None:
            out[i] = exact_prior_conditional_sample(system, rng)
        else:
            out[i] = GaussianPosterior(system, likelihood).sample(rng)
    return out


def make_potential(system, likelihood=None):
    prior = PriorPotential(system)
    if likelihood is None:
        return prior
    return PosteriorPotential(prior, likelihood)


def initial_stepsize(potential, precond: Preconditioner, u=None, tol=1e-3):
    """``d^{-1/3} / lambda_max(S^T P S)``.

    ``P`` is the prior precision plus, for posterior potentials, the
    Gauss-Newton matrix of the likelihood at ``u`` (zeros by default).
    """
    d = potential.dim
    prior = getattr(potential, "prior", potential)
    gn = None
    lik = getattr(potential, "likelihood", None)
    if lik is not None and lik.n_obs > 0:
        gn = lik.gauss_newton_matrix(np.zeros(d) if u is None else u)

    def op(w):
        v = precond.apply_sqrt(w)
        hv = prior.hessian_apply(v)
        if gn is not None:
            hv = hv + spmv(gn, v)
        return precond.apply_sqrt_t(hv)

    return d ** (-1.0 / 3.0) / max_eig(op, d, tol=tol, max_iter=5000)


def precision_extremes(system: FemSystem, likelihood=None, tol=1e-4):
    """``(m, L)`` of the conditional (linear-posterior) precision via band solves."""
    prec = posterior_precision(system, likelihood)
    factor = banded_cholesky(prec, 2 * system.bandwidth)
    est = extreme_eigs(prec, system.dim, tol=tol, solve=factor.solve)
    return est.lambda_min, est.lambda_max


def auto_ula_stepsize(system: FemSystem, likelihood=None, u0=None, rng=None, n_test=100, max_halvings=60):
    """Unpreconditioned ULA stepsize: ``m / (4 L^2)``, halved until ``n_test`` steps stay finite.

    ``m, L`` are estimated at the supplied (mean-theta) system; for the
    sigmoid likelihood the linearisation at ``u0`` enters through its
    Gauss-Newton matrix.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    u0 = np.zeros(system.dim) if u0 is None else np.asarray(u0, dtype=np.float64)
    m, L = precision_extremes(system, likelihood if isinstance(likelihood, LinearLikelihood) else None)
    eta = m / (4.0 * L * L)
    potential = make_potential(system, likelihood)
    precond = Preconditioner("identity", system.dim)
    for _ in range(max_halvings):
        u = u0.copy()
        try:
            for _ in range(n_test):
                u = ula_step(u, potential, precond, eta, rng)
            return eta
        except DivergenceError:
            eta *= 0.5
    raise DivergenceError(f"ULA unstable even at eta={eta:.3e}")


# ---------------------------------------------------------------------------
# outer loop


def run_algorithm1(
    problem: StatFEMProblem,
    cfg: SamplerConfig,
    K: int,
    u0,
    seed: int = 0,
    chain: int = 0,
    likelihood=None,
    precond: Preconditioner | None = None,
) -> ChainRecord:
    """Marginal sampler: ``theta_k ~ p(theta)`` then ``n_inner`` kernel steps.

    The first ``cfg.n_warmup`` outer iterations are discarded; during them
    MH kernels adapt ``eta`` (or ``pcn_beta``) every ``cfg.adapt_batch``
    decisions. ``precond`` defaults to the identity. With
    ``cfg.refactor_per_theta`` the preconditioner is rebuilt from the
    current ``theta_k`` system (meshes up to 64 cells per side only).

    Raises
    ------
    DivergenceError
        Naming the outer and inner index of the first non-finite state.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    if cfg.kernel == "pcn" and likelihood is None:
        logger.info("pCN without a likelihood: every proposal is accepted")
    if cfg.refactor_per_theta and problem.mesh.n_cells_per_side > 64:
        raise ValueError("per-theta preconditioner refactoring is limited to meshes <= 64")

    theta_stream, noise = chain_streams(seed, chain)
    d = problem.dim
    u = np.array(u0, dtype=np.float64)
    if u.shape != (d,):
        raise ValueError(f"u0 must have shape ({d},)")
    if precond is None:
        precond = build_preconditioner("identity", problem.mean_system)

    n_total = cfg.n_warmup + K
    samples = np.empty((K, d))
    log_target = np.empty(K)
    seeds = np.empty(K, dtype=np.uint64)
    eta = cfg.eta
    beta = cfg.pcn_beta
    eta_trace = []
    batch = []
    n_acc = n_prop = 0
    log_lik_u = None

    for k in range(n_total):
        warm = k < cfg.n_warmup
        tseed = int(theta_stream.integers(0, 2**63))
        theta = problem.draw_theta(theta_rng(tseed))
        system = problem.system(theta)
        potential = make_potential(system, likelihood)
        pc = precond
        if cfg.refactor_per_theta and precond.kind in ("prior_mean_theta", "posterior_mean_theta"):
            pc = build_preconditioner(precond.kind, system, likelihood)

        if cfg.kernel == "ula":
            for i in range(cfg.n_inner):
                try:
                    u = ula_step(u, potential, pc, eta, noise)
                except DivergenceError as err:
                    raise DivergenceError(f"ULA diverged at outer step {k}, inner step {i}", k, i) from err
            with np.errstate(over="ignore"):
                lt = float(potential.log_target(u))
        elif cfg.kernel == "mala":
            state = ChainState.at(u, potential, theta)
            for i in range(cfg.n_inner):
                state, acc = mala_step(state, potential, pc, eta, noise)
                batch.append(acc)
                if not warm:
                    n_acc += acc
                    n_prop += 1
            u, lt = state.u, state.log_target
        else:
            log_lik_u = None
            for i in range(cfg.n_inner):
                u, acc, log_lik_u = pcn_step(u, system, likelihood, beta, noise, log_lik_u)
                batch.append(acc)
                if not warm:
                    n_acc += acc
                    n_prop += 1
            lt = float(potential.log_target(u))

        _check_finite(u, k, cfg.n_inner - 1)
        if warm and cfg.kernel != "ula" and len(batch) >= cfg.adapt_batch:
            if cfg.kernel == "mala":
                eta = adapt_stepsize(batch, eta, cfg.target_accept)
                eta_trace.append(eta)
            else:
                beta = min(1.0, adapt_stepsize(batch, beta, cfg.target_accept))
                eta_trace.append(beta)
            batch = []
        if not warm:
            j = k - cfg.n_warmup
            samples[j] = u
            log_target[j] = lt
            seeds[j] = tseed
        elif k == cfg.n_warmup - 1:
            batch = []

    accept = None if cfg.kernel == "ula" else (n_acc / n_prop if n_prop else 0.0)
    final = beta if cfg.kernel == "pcn" else eta
    return ChainRecord(samples, seeds, log_target, accept, final, np.asarray(eta_trace))
