"""Geometric Brownian motion: the plain discrete determinant does not converge.

The generating function of f(X_T) = 1/2 (log X_T)^2 has the closed-form
prefactor 3^(-1/2) e^(-1/3) at lambda = -1.  The regularized determinant with
the trace correction reproduces it at every resolution; the plain determinant
of the discretized Hessian stalls at 3^(-1/2) no matter how many eigenvalues
are kept.

    python demos/gbm_naive_breakdown.py
"""

import numpy as np

from rare_sorm import OptimizerConfig, find_instanton_mgf
from rare_sorm.models import geometric_bm
from rare_sorm.prefactor import compute_mgf_prefactor, naive_mgf_prefactor

exact = np.exp(-1 / 3) / np.sqrt(3)
system, obs = geometric_bm()

print(f"exact R = {exact:.6f}")
print(f"{'n_t':>6s} {'R (regularized)':>16s} {'naive m=1':>10s} {'naive m=20':>11s}")
for n_t in (100, 250, 1000):
    grid = system.grid(n_t)
    sol = find_instanton_mgf(system, obs, grid, -1.0, OptimizerConfig(grad_tol=1e-9))
    R = compute_mgf_prefactor(system, obs, grid, sol, M=20)
    n1 = naive_mgf_prefactor(system, obs, grid, sol, 1)
    n20 = naive_mgf_prefactor(system, obs, grid, sol, 20)
    print(f"{n_t:6d} {R:16.6f} {n1:10.6f} {n20:11.6f}")
