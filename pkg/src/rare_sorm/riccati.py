"""Prefactor for additive noise via a forward matrix Riccati equation.

Along the instanton ``(phi_z, theta_z)``

    dQ/dt = sigma sigma^T + Q grad b^T + grad b Q + Q <grad^2 b, theta> Q,   Q(0) = 0,

and with ``U = Id - lam grad^2 f(phi_T) Q(T)``

    C = lam^-1 exp(1/2 int tr[<grad^2 b, theta> Q] dt) [det U <grad f, Q(T) U^-1 grad f>]^(-1/2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DivergenceError, ModelError


class RiccatiSingularityError(ArithmeticError):
    """``U`` is (numerically) singular at final time."""


@dataclass(frozen=True)
class RiccatiState:
    Q: np.ndarray        # (n_t+1, n, n)
    U: np.ndarray        # (n, n)
    integral: float      # int tr[<grad^2 b, theta> Q] dt

    @property
    def max_asymmetry(self):
        return float(np.max(np.abs(self.Q - np.transpose(self.Q, (0, 2, 1)))))

    @property
    def min_eigenvalue(self):
        return float(np.min(np.linalg.eigvalsh(self.Q)))


def _check_additive(system, phi):
    dsig = system.diffusion_jacobian(phi)
    if np.max(np.abs(dsig)) > 0:
        raise ModelError("the Riccati route requires additive (state-independent) noise")


def riccati_solve(system, obs, grid, sol) -> RiccatiState:
    """Integrate the Riccati equation with RK4 along the instanton."""
    n, dt = system.dim, grid.dt
    phi = sol.phi_z.as_steps()
    theta = sol.theta_z.as_steps()
    _check_additive(system, phi)
    sig = system.diffusion(phi)
    D = np.einsum("kij,klj->kil", sig, sig)
    J = system.drift_jacobian(phi)
    K = np.einsum("kijl,ki->kjl", system.drift_hessian(phi), theta)
    # half-step values from linear interpolation of (phi, theta)
    phi_h = 0.5 * (phi[1:] + phi[:-1])
    th_h = 0.5 * (theta[1:] + theta[:-1])
    sig_h = system.diffusion(phi_h)
    D_h = np.einsum("kij,klj->kil", sig_h, sig_h)
    J_h = system.drift_jacobian(phi_h)
    K_h = np.einsum("kijl,ki->kjl", system.drift_hessian(phi_h), th_h)

    def rhs(Q, D, J, K):
        return D + Q @ J.T + J @ Q + Q @ K @ Q

    Q = np.zeros((grid.n_t + 1, n, n))
    q = Q[0]
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(grid.n_t):
            k1 = rhs(q, D[k], J[k], K[k])
            k2 = rhs(q + 0.5 * dt * k1, D_h[k], J_h[k], K_h[k])
            k3 = rhs(q + 0.5 * dt * k2, D_h[k], J_h[k], K_h[k])
            k4 = rhs(q + dt * k3, D[k + 1], J[k + 1], K[k + 1])
            q = q + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            q = 0.5 * (q + q.T)
            if not np.all(np.isfinite(q)):
                raise DivergenceError(f"Riccati solution blew up at step {k + 1}", step=k + 1)
            Q[k + 1] = q
    trK = np.einsum("kij,kji->k", K, Q)
    integral = float(dt * (0.5 * trK[0] + trK[1:-1].sum() + 0.5 * trK[-1]))
    U = np.eye(n) - sol.lambda_z * np.asarray(obs.hessian(phi[-1])).reshape(n, n) @ Q[-1]
    return RiccatiState(Q=Q, U=U, integral=integral)


def riccati_prefactor(system, obs, grid, sol, return_state: bool = False):
    """Prefactor ``C(z)`` for an additive-noise system."""
    if sol.lambda_z == 0:
        raise ValueError("the instanton is trivial (lambda_z = 0); the prefactor is undefined")
    st = riccati_solve(system, obs, grid, sol)
    n = system.dim
    detU = float(np.linalg.det(st.U))
    if abs(detU) < 1e-12 * max(1.0, float(np.linalg.norm(st.U)) ** n):
        raise RiccatiSingularityError(f"det U = {detU:.3e}: pseudo-singularity of the Riccati solution")
    gf = np.asarray(obs.gradient(sol.phi_z.final)).reshape(n)
    quad = float(gf @ st.Q[-1] @ np.linalg.solve(st.U, gf))
    arg = detU * quad
    if not arg > 0:
        raise RiccatiSingularityError(f"det U <grad f, Q U^-1 grad f> = {arg:.3e} is not positive")
    C = np.exp(0.5 * st.integral) / (sol.lambda_z * np.sqrt(arg))
    return (float(C), st) if return_state else float(C)
