"""Chain diagnostics, Gaussian divergences and numerical checks of the ULA bounds.

For a quadratic potential with precision ``P`` and linear term ``c`` the
(preconditioned) ULA iterates stay Gaussian, so their law after ``k`` steps
is known exactly. :func:`ula_moment_oracle` propagates it step by step;
:func:`ula_moments_spectral` evaluates the same recursion in closed form in
the eigenbasis of the preconditioned precision. The bound checks measure
``KL`` / ``W2`` between that law and the conditional target.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from .fem_poisson import FemSystem
from .gp_theta import GpSpec
from .potentials import posterior_precision
from .problem import StatFEMProblem
from .sparse_core import extreme_eigs, spmv

logger = logging.getLogger(__name__)

__all__ = [
    "GaussianMoments",
    "DenseTarget",
    "BoundReport",
    "acf",
    "ess",
    "summary_errors",
    "gaussian_kl",
    "gaussian_w2",
    "ula_moment_oracle",
    "ula_moments_spectral",
    "ula_stationary_moments",
    "verify_kl_bound",
    "verify_w2_bound",
    "default_k_grid",
    "condition_study",
]

DENSE_LIMIT = 200


# ---------------------------------------------------------------------------
# chain statistics


def acf(series, max_lag):
    """Sample autocorrelation at lags ``0..max_lag`` (biased estimator, FFT).

    Raises
    ------
    ValueError
        If the series is not longer than ``max_lag`` or has zero variance.
    """
    x = np.asarray(series, dtype=np.float64)
    n = x.size
    if x.ndim != 1 or n <= max_lag:
        raise ValueError("series must be 1-D and longer than max_lag")
    mean = x.mean()
    x = x - mean
    var = np.dot(x, x) / n
    if var == 0 or var <= (1e-12 * mean) ** 2:
        raise ValueError("series has zero variance")
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, nfft)
    r = np.fft.irfft(f * np.conj(f), nfft)[: max_lag + 1] / n
    return r / var


def ess(series):
    """Effective sample size with Geyer's initial-positive-sequence truncation.

    Sums consecutive autocorrelation pairs ``rho_{2t} + rho_{2t+1}`` while they
    stay positive, forcing the sequence of pair sums to be non-increasing.
    The integrated autocorrelation time is floored at ``1 / log10(N)`` so that
    antithetic chains give at most ``N log10(N)``.
    """
    x = np.asarray(series, dtype=np.float64)
    n = x.size
    if n < 100:
        raise ValueError("ess needs at least 100 samples")
    rho = acf(x, n - 1)
    n_pairs = n // 2
    pairs = rho[: 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
    total = pairs[0]
    prev = pairs[0]
    for g in pairs[1:]:
        if g <= 0:
            break
        g = min(g, prev)
        total += g
        prev = g
    tau = max(-1.0 + 2.0 * total, 1.0 / np.log10(n))
    return n / tau


def summary_errors(samples, reference):
    """Relative l2 errors of the sample mean and elementwise variance.

    Parameters
    ----------
    samples, reference : array (N, d) or ChainRecord
    """
    s = np.asarray(getattr(samples, "samples", samples), dtype=np.float64)
    r = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    if s.size == 0 or r.size == 0:
        raise ValueError("both sample sets must be nonempty")
    m_ref = r.mean(axis=0)
    v_ref = r.var(axis=0)
    nm, nv = np.linalg.norm(m_ref), np.linalg.norm(v_ref)
    if nm == 0 or nv == 0:
        raise ValueError("reference mean or variance has zero norm")
    return (float(np.linalg.norm(s.mean(axis=0) - m_ref) / nm),
            float(np.linalg.norm(s.var(axis=0) - v_ref) / nv))


# ---------------------------------------------------------------------------
# Gaussians


@dataclass(frozen=True, eq=False)
class GaussianMoments:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or cov.shape[0] != np.size(self.mean):
            raise ValueError("cov must be square and match the mean")
        if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-14 * np.abs(cov).max(initial=0.0)):
            raise ValueError("cov must be symmetric")

    @property
    def dim(self):
        return np.size(self.mean)

    def transform(self, T, shift=0.0):
        """Law of ``T x + shift``."""
        return GaussianMoments(T @ self.mean + shift, T @ self.cov @ T.T)


def gaussian_kl(p: GaussianMoments, q: GaussianMoments) -> float:
    """``KL(p || q)`` in closed form.

    Raises
    ------
    numpy.linalg.LinAlgError
        If ``q.cov`` is singular.
    """
    d = p.dim
    Lq = np.linalg.cholesky(q.cov)
    A = sla.solve_triangular(Lq, p.cov, lower=True)
    tr = np.trace(sla.solve_triangular(Lq, A.T, lower=True))
    dm = sla.solve_triangular(Lq, q.mean - p.mean, lower=True)
    logdet_q = 2.0 * np.sum(np.log(np.diag(Lq)))
    sign, logdet_p = np.linalg.slogdet(p.cov)
    if sign <= 0:
        raise np.linalg.LinAlgError("p.cov must be positive definite")
    return float(0.5 * (tr + dm @ dm - d + logdet_q - logdet_p))


def _psd_sqrt(S, name):
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    tol = 1e-10 * max(1.0, np.abs(w).max(initial=0.0))
    if w.min(initial=0.0) < -tol:
        raise ValueError(f"{name} is not positive semidefinite (eigenvalue {w.min():.3e})")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def gaussian_w2(p: GaussianMoments, q: GaussianMoments) -> float:
    """2-Wasserstein distance between Gaussians (eigh square roots, clamped at 0)."""
    rq = _psd_sqrt(q.cov, "q.cov")
    _psd_sqrt(p.cov, "p.cov")
    cross = _psd_sqrt(rq @ p.cov @ rq, "cross term")
    dm = p.mean - q.mean
    w2sq = dm @ dm + np.trace(p.cov) + np.trace(q.cov) - 2.0 * np.trace(cross)
    return float(np.sqrt(max(w2sq, 0.0)))


@dataclass(frozen=True, eq=False)
class DenseTarget:
    """Quadratic potential ``0.5 u^T P u - c^T u``; target ``N(P^{-1} c, P^{-1})``."""

    P: np.ndarray
    c: np.ndarray

    @classmethod
    def from_system(cls, system: FemSystem, likelihood=None):
        """Dense conditional prior (or linear-likelihood posterior) target."""
        if system.dim > DENSE_LIMIT:
            raise ValueError(f"dense oracle limited to d <= {DENSE_LIMIT}, got {system.dim}")
        P = posterior_precision(system, likelihood).todense()
        c = system.A.T @ (system.G_inv * system.b)
        if likelihood is not None and likelihood.n_obs > 0:
            c = c + (likelihood.obs.H.T @ likelihood.y_sum) / likelihood.obs.R_diag
        return cls(0.5 * (P + P.T), np.asarray(c, dtype=np.float64))

    @property
    def dim(self):
        return self.c.size

    @property
    def eigenvalues(self):
        return np.linalg.eigvalsh(self.P)

    @property
    def mean(self):
        return np.linalg.solve(self.P, self.c)

    @property
    def cov(self):
        return np.linalg.inv(self.P)

    def moments(self):
        return GaussianMoments(self.mean, 0.5 * (self.cov + self.cov.T))


def _dense_guard(d):
    if d > DENSE_LIMIT:
        raise ValueError(f"dense oracle limited to d <= {DENSE_LIMIT}, got {d}")


def ula_moment_oracle(target: DenseTarget, eta, mu0, Sigma0, k, M=None) -> GaussianMoments:
    """Law of the ULA iterate ``u_k`` from ``u_0 ~ N(mu0, Sigma0)``.

    Literal propagation ``mu <- B mu + eta M c``, ``Sigma <- B Sigma B^T +
    2 eta M`` with ``B = I - eta M P``.
    """
    d = target.dim
    _dense_guard(d)
    M = np.eye(d) if M is None else np.asarray(M, dtype=np.float64)
    B = np.eye(d) - eta * M @ target.P
    drift = eta * M @ target.c
    mu = np.array(mu0, dtype=np.float64)
    S = np.array(Sigma0, dtype=np.float64)
    for _ in range(int(k)):
        mu = B @ mu + drift
        S = B @ S @ B.T + 2.0 * eta * M
        S = 0.5 * (S + S.T)
    return GaussianMoments(mu, S)


def _whitening(target, M):
    """``(S, P_v, c_v)`` with ``S S^T = M`` and the target in ``v = S^{-1} u``."""
    d = target.dim
    if M is None:
        S = np.eye(d)
    else:
        S = np.linalg.cholesky(np.asarray(M, dtype=np.float64))
    Pv = S.T @ target.P @ S
    return S, 0.5 * (Pv + Pv.T), S.T @ target.c


def ula_moments_spectral(target: DenseTarget, eta, mu0, Sigma0, ks, M=None):
    """Closed-form ULA laws at every ``k`` in ``ks`` (same recursion as the oracle).

    In the eigenbasis of ``P_M = S^T P S`` the iteration matrix is diagonal,
    ``b_i = 1 - eta lambda_i``, so ``B^k`` and the geometric noise sum are
    evaluated directly.
    """
    d = target.dim
    _dense_guard(d)
    S, Pv, cv = _whitening(target, M)
    lam, Q = np.linalg.eigh(Pv)
    T = S @ Q  # u = T w
    Tinv = np.linalg.solve(T, np.eye(d))
    w0 = Tinv @ np.asarray(mu0, dtype=np.float64)
    C0 = Tinv @ np.asarray(Sigma0, dtype=np.float64) @ Tinv.T
    w_star = (Q.T @ cv) / lam
    b = 1.0 - eta * lam
    out = []
    for k in np.atleast_1d(ks):
        k = int(k)
        bk = b**k
        b2 = b * b
        with np.errstate(divide="ignore", invalid="ignore"):
            geo = np.where(np.isclose(b2, 1.0, rtol=0, atol=1e-15), float(k), (1.0 - b2**k) / (1.0 - b2))
        wk = w_star + bk * (w0 - w_star)
        Ck = bk[:, None] * C0 * bk[None, :] + np.diag(2.0 * eta * geo)
        cov = T @ Ck @ T.T
        out.append(GaussianMoments(T @ wk, 0.5 * (cov + cov.T)))
    return out


def ula_stationary_moments(target: DenseTarget, eta, M=None) -> GaussianMoments:
    """Stationary ULA law; for ``M = I`` the covariance is ``P^{-1} (I - eta P / 2)^{-1}``.

    Raises
    ------
    ValueError
        If ``eta`` is too large for the chain to be stable.
    """
    S, Pv, cv = _whitening(target, M)
    lam, Q = np.linalg.eigh(Pv)
    if np.any(np.abs(1.0 - eta * lam) >= 1.0):
        raise ValueError("eta too large: ULA has no stationary law")
    T = S @ Q
    var = 1.0 / (lam * (1.0 - 0.5 * eta * lam))
    cov = (T * var) @ T.T
    return GaussianMoments(T @ ((Q.T @ cv) / lam), 0.5 * (cov + cov.T))


# ---------------------------------------------------------------------------
# bound verification


@dataclass
class BoundReport:
    """Measured divergence against the theoretical bound on a grid of ``k``."""

    kind: str
    k: np.ndarray
    measured: np.ndarray
    bound: np.ndarray
    m: float
    L: float
    eta: float
    d: int
    initial: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def kappa(self):
        return self.L / self.m

    @property
    def violations(self):
        return int(np.sum(self.measured > self.bound * (1.0 + 1e-9) + 1e-14))

    @property
    def ok(self):
        return self.violations == 0


def default_k_grid(k_max=10_000, n=40):
    return np.unique(np.r_[0, np.geomspace(1, k_max, n).astype(np.int64)])


def _bound_setup(target, M):
    _, Pv, _ = _whitening(target, M)
    lam = np.linalg.eigvalsh(Pv)
    m, L = float(lam[0]), float(lam[-1])
    if not m > 0:
        raise ValueError("target precision is not positive definite")
    return m, L


def _default_p0(target, L, mu0, Sigma0, M):
    d = target.dim
    if mu0 is None:
        mu0 = np.zeros(d)
    if Sigma0 is None:
        base = np.eye(d) if M is None else np.asarray(M, dtype=np.float64)
        Sigma0 = base / L
    return GaussianMoments(np.asarray(mu0, dtype=np.float64), np.asarray(Sigma0, dtype=np.float64))


def verify_kl_bound(target: DenseTarget, eta, k_grid=None, mu0=None, Sigma0=None, M=None) -> BoundReport:
    """Check ``KL(p_k || target) <= exp(-m eta k) KL(p_0 || target) + 8 eta d L kappa``.

    ``m, L`` are the extreme eigenvalues of the (preconditioned) precision
    from a dense spectrum. ``p_0`` defaults to ``N(0, M / L)``.

    Raises
    ------
    ValueError
        If ``eta > m / (4 L^2)``.
    """
    m, L = _bound_setup(target, M)
    if not 0 < eta <= m / (4.0 * L * L) * (1.0 + 1e-12):
        raise ValueError(f"stepsize {eta:.3e} violates eta <= m/(4 L^2) = {m / (4 * L * L):.3e}")
    k_grid = default_k_grid() if k_grid is None else np.asarray(k_grid, dtype=np.int64)
    p0 = _default_p0(target, L, mu0, Sigma0, M)
    goal = target.moments()
    kl0 = gaussian_kl(p0, goal)
    laws = ula_moments_spectral(target, eta, p0.mean, p0.cov, k_grid, M)
    measured = np.array([gaussian_kl(p, goal) for p in laws])
    d = target.dim
    bound = np.exp(-m * eta * k_grid) * kl0 + 8.0 * eta * d * L * (L / m)
    return BoundReport("kl", k_grid, measured, bound, m, L, float(eta), d, kl0)


def verify_w2_bound(target: DenseTarget, eta, k_grid=None, mu0=None, Sigma0=None, M=None) -> BoundReport:
    """Check ``W2^2(p_k, target) <= 2 (1 - m eta)^{2k} W2^2(p_0, target) + (49/9) kappa^2 eta d``.

    ``measured`` and ``bound`` are both squared distances.

    Raises
    ------
    ValueError
        If ``eta > 2 / (m + L)``.
    """
    m, L = _bound_setup(target, M)
    if not 0 < eta <= 2.0 / (m + L) * (1.0 + 1e-12):
        raise ValueError(f"stepsize {eta:.3e} violates eta <= 2/(m+L) = {2 / (m + L):.3e}")
    k_grid = default_k_grid() if k_grid is None else np.asarray(k_grid, dtype=np.int64)
    p0 = _default_p0(target, L, mu0, Sigma0, M)
    goal = target.moments()
    w0 = gaussian_w2(p0, goal) ** 2
    laws = ula_moments_spectral(target, eta, p0.mean, p0.cov, k_grid, M)
    measured = np.array([gaussian_w2(p, goal) ** 2 for p in laws])
    d = target.dim
    kappa = L / m
    bound = 2.0 * (1.0 - m * eta) ** (2 * k_grid) * w0 + 49.0 / 9.0 * kappa**2 * eta * d
    return BoundReport("w2", k_grid, measured, bound, m, L, float(eta), d, w0)


# ---------------------------------------------------------------------------
# conditioning


def _precision_condition(system: FemSystem, tol, seed):
    """``kappa`` of ``A^T G^{-1} A`` using band solves for the inverse."""
    A = system.A
    f = system.factor
    G, Ginv = system.G, system.G_inv

    def apply(v):
        return spmv(A.T, Ginv * spmv(A, v))

    def solve(v):
        return f.solve(G * f.solve(v))

    return extreme_eigs(apply, system.dim, tol=tol, solve=solve, seed=seed).condition_number


def _preconditioned_condition(system: FemSystem, ref: FemSystem, tol, seed):
    """``kappa`` of ``S^T A^T G^{-1} A S`` with ``S = A_ref^{-1} G^{1/2}``."""
    A, f = system.A, system.factor
    Aref, fref = ref.A, ref.factor
    G, Ginv, Gs = system.G, system.G_inv, system.G_sqrt

    def apply(w):
        v = fref.solve(Gs * w)
        return Gs * fref.solve(spmv(A.T, Ginv * spmv(A, v)))

    def solve(w):
        v = spmv(Aref.T, w / Gs)
        v = f.solve(G * f.solve(v))
        return spmv(Aref, v) / Gs

    return extreme_eigs(apply, system.dim, tol=tol, solve=solve, seed=seed).condition_number


def condition_study(mesh_sizes, gp: GpSpec | None = None, n_theta_samples=50, rng=None,
                    tol=1e-4, f_const=1.0, beta_xi=0.05):
    """Monte Carlo condition numbers with and without the mean-theta preconditioner.

    Returns one dict per mesh level with keys ``mesh_n, d, mean_kappa,
    kappa_q25, kappa_q75, mean_kappa_M, kappa_M_q25, kappa_M_q75``.
    """
    if n_theta_samples < 20:
        raise ValueError("n_theta_samples must be at least 20")
    gp = GpSpec() if gp is None else gp
    rng = np.random.default_rng(0) if rng is None else rng
    rows = []
    for n in mesh_sizes:
        problem = StatFEMProblem(int(n), gp=gp, f_const=f_const, beta_xi=beta_xi)
        ref = problem.mean_system
        kap = np.empty(n_theta_samples)
        kapM = np.empty(n_theta_samples)
        for i in range(n_theta_samples):
            system = problem.system(problem.draw_theta(rng))
            kap[i] = _precision_condition(system, tol, seed=i)
            kapM[i] = _preconditioned_condition(system, ref, tol, seed=i)
        rows.append(dict(
            mesh_n=int(n), d=problem.dim,
            mean_kappa=float(kap.mean()),
            kappa_q25=float(np.quantile(kap, 0.25)), kappa_q75=float(np.quantile(kap, 0.75)),
            mean_kappa_M=float(kapM.mean()),
            kappa_M_q25=float(np.quantile(kapM, 0.25)), kappa_M_q75=float(np.quantile(kapM, 0.75)),
        ))
        logger.info("mesh %d: E[kappa]=%.3e E[kappa_M]=%.3f", n, rows[-1]["mean_kappa"], rows[-1]["mean_kappa_M"])
    return rows
