"""Langevin sampling for statistical finite elements on the stochastic Poisson problem."""

from .diagnostics import (
    BoundReport,
    DenseTarget,
    GaussianMoments,
    acf,
    condition_study,
    ess,
    gaussian_kl,
    gaussian_w2,
    summary_errors,
    ula_moment_oracle,
    ula_moments_spectral,
    ula_stationary_moments,
    verify_kl_bound,
    verify_w2_bound,
)
from .fem_poisson import FemSystem, Mesh, ObservationOperator, assemble, build_mesh, build_observation
from .gp_theta import GpSpec, ThetaField, build_kron_factor, sample_theta
from .potentials import (
    LinearLikelihood,
    PosteriorPotential,
    Preconditioner,
    PriorPotential,
    SigmoidLikelihood,
    build_preconditioner,
    map_estimate,
)
from .problem import StatFEMProblem
from .samplers import (
    ChainRecord,
    DivergenceError,
    GaussianPosterior,
    SamplerConfig,
    exact_posterior_conditional_sample,
    exact_prior_conditional_sample,
    mala_step,
    pcn_step,
    run_algorithm1,
    ula_step,
)
from .sparse_core import BandedCholesky, SparseMatrix, banded_cholesky, cg_solve, extreme_eigs, spmv

__version__ = "0.1.0"
