"""The stochastic Poisson model: mesh + log-GP diffusion + forcing noise."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .fem_poisson import FemSystem, Mesh, assemble, build_mesh
from .gp_theta import GpSpec, KroneckerFactor, ThetaField, build_kron_factor, mean_log_theta, sample_theta

__all__ = ["StatFEMProblem"]


@dataclass(eq=False)
class StatFEMProblem:
    """Builds conditional systems ``A_theta, b, G`` for GP draws of theta.

    Parameters
    ----------
    mesh : Mesh or int
        Mesh, or the number of cells per side.
    gp : GpSpec
        Prior of ``log theta``.
    f_const, beta_xi : float
        Deterministic forcing and white-noise amplitude.
    """

    mesh: Mesh
    gp: GpSpec = field(default_factory=GpSpec)
    f_const: float = 1.0
    beta_xi: float = 0.05

    def __post_init__(self):
        if not isinstance(self.mesh, Mesh):
            self.mesh = build_mesh(int(self.mesh))

    @property
    def dim(self):
        return self.mesh.n_nodes

    @cached_property
    def kron_factor(self) -> KroneckerFactor:
        c = self.mesh.grid_coords_1d
        return build_kron_factor(c, self.gp)

    def draw_theta(self, rng) -> ThetaField:
        return sample_theta(self.kron_factor, self.gp, rng)

    def system(self, theta) -> FemSystem:
        values = theta.values if isinstance(theta, ThetaField) else theta
        return assemble(self.mesh, values, self.f_const, self.beta_xi)

    @cached_property
    def mean_theta(self) -> np.ndarray:
        """``exp`` of the GP log-mean at the nodes."""
        X, Y = self.mesh.nodes[:, 0], self.mesh.nodes[:, 1]
        return np.exp(self.gp.mean_fn(X, Y))

    @cached_property
    def mean_system(self) -> FemSystem:
        """System at ``theta = exp(mean of log theta)``."""
        return self.system(self.mean_theta)

    def mean_log_theta(self):
        return mean_log_theta(self.kron_factor, self.gp)
