"""
Checking the ULA convergence bounds on a Gaussian target
========================================================

For fixed theta the ULA iterates stay Gaussian, so their KL divergence and
Wasserstein distance to the conditional prior can be computed exactly at
every step and set against the theoretical bounds.
"""

import numpy as np

from statfem_ula import StatFEMProblem
from statfem_ula.diagnostics import DenseTarget, default_k_grid, verify_kl_bound, verify_w2_bound

problem = StatFEMProblem(5)
target = DenseTarget.from_system(problem.system(problem.draw_theta(np.random.default_rng(5))))
lam = target.eigenvalues
m, L = lam[0], lam[-1]
print(f"d = {target.dim}, m = {m:.3e}, L = {L:.3e}, kappa = {L / m:.1f}")

ks = default_k_grid(10_000, 8)
kl = verify_kl_bound(target, m / (4 * L * L), ks)
w2 = verify_w2_bound(target, 1.0 / L, ks)

# %%
# The KL stepsize condition eta <= m / (4 L^2) is very restrictive, so the
# chain barely moves in 10^4 steps; the W2 condition allows eta ~ 1 / L.
print(f"{'k':>6} {'KL':>10} {'KL bound':>10} {'W2^2':>10} {'W2^2 bound':>11}")
for i, k in enumerate(ks):
    print(f"{k:>6} {kl.measured[i]:>10.3e} {kl.bound[i]:>10.3e} {w2.measured[i]:>10.3e} {w2.bound[i]:>11.3e}")
print(f"violations: KL {kl.violations}, W2 {w2.violations}")
