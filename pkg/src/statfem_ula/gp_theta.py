"""Log-Gaussian-process diffusion coefficient on the structured grid.

The squared-exponential kernel is separable across coordinates, so on the
tensor grid its covariance is ``K1 (x) K2`` and a draw only needs the two
small per-axis Cholesky factors: ``log theta = mean + vec(L1 Z L2^T)`` with
row-major ``vec`` (y fastest, matching the mesh node ordering).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "GpSpec",
    "KroneckerFactor",
    "ThetaField",
    "default_log_mean",
    "se_kernel_1d",
    "build_kron_factor",
    "mean_log_theta",
    "sample_theta",
]


def default_log_mean(x, y):
    """``log(1 + 0.3 sin(pi (x + y)))``."""
    return np.log1p(0.3 * np.sin(np.pi * (x + y)))


@dataclass(frozen=True)
class GpSpec:
    sigma: float = 0.1
    length_scale: float = 0.2
    mean_fn: Callable = field(default=default_log_mean, compare=False)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.length_scale > 0:
            raise ValueError("length_scale must be positive")


def se_kernel_1d(x1, x2, amplitude, length_scale):
    """``amplitude * exp(-(x - x')^2 / (2 l^2))`` on all pairs."""
    d = np.subtract.outer(np.asarray(x1, float), np.asarray(x2, float))
    return amplitude * np.exp(-0.5 * (d / length_scale) ** 2)


@dataclass(frozen=True, eq=False)
class KroneckerFactor:
    """Per-axis Cholesky factors; ``K1`` carries ``sigma^2``, ``K2`` is unit amplitude."""

    L1: np.ndarray
    L2: np.ndarray
    jitter: float
    x1: np.ndarray
    x2: np.ndarray

    @property
    def shape(self):
        return (self.x1.size, self.x2.size)

    @property
    def n_nodes(self):
        return self.x1.size * self.x2.size


@dataclass(frozen=True, eq=False)
class ThetaField:
    values: np.ndarray
    log_values: np.ndarray

    @classmethod
    def from_log(cls, log_values):
        log_values = np.asarray(log_values, dtype=np.float64)
        return cls(np.exp(log_values), log_values)


def _jittered_cholesky(K, scale):
    jitter = 1e-12 * scale
    while jitter <= 1e-6 * scale * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + jitter * np.eye(K.shape[0])), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise np.linalg.LinAlgError(
        f"kernel matrix not positive definite even with jitter {1e-6 * scale:.1e}"
    )


def build_kron_factor(grid_coords_1d, spec: GpSpec, grid_coords_1d_y=None) -> KroneckerFactor:
    """Cholesky-factor the per-axis kernel matrices of ``k_se``.

    Jitter starts at ``1e-12 * amplitude`` and grows tenfold up to
    ``1e-6 * amplitude`` before giving up.
    """
    x1 = np.asarray(grid_coords_1d, dtype=np.float64)
    x2 = x1 if grid_coords_1d_y is None else np.asarray(grid_coords_1d_y, dtype=np.float64)
    for x in (x1, x2):
        if np.any(np.diff(x) <= 0):
            raise ValueError("grid coordinates must be sorted and distinct")
    amp = spec.sigma**2
    L1, j1 = _jittered_cholesky(se_kernel_1d(x1, x1, amp, spec.length_scale), amp)
    L2, j2 = _jittered_cholesky(se_kernel_1d(x2, x2, 1.0, spec.length_scale), 1.0)
    return KroneckerFactor(L1, L2, max(j1, j2 * amp), x1, x2)


def mean_log_theta(factor: KroneckerFactor, spec: GpSpec) -> np.ndarray:
    """Log-mean at every grid node, in mesh node order."""
    X, Y = np.meshgrid(factor.x1, factor.x2, indexing="ij")
    return spec.mean_fn(X, Y).ravel()


def sample_theta(factor: KroneckerFactor, spec: GpSpec, rng=None, z=None) -> ThetaField:
    """Draw ``theta = exp(mean + (L1 (x) L2) vec(Z))`` by the vec trick.

    ``z`` (shape ``(n1, n2)``) may be passed to fix the randomness.
    """
    if z is None:
        z = rng.standard_normal(factor.shape)
    w = factor.L1 @ z @ factor.L2.T
    return ThetaField.from_log(mean_log_theta(factor, spec) + w.ravel())
