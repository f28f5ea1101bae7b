"""Forward solves, discrete adjoint gradients and Euler-Maruyama sampling.

Every derivative here is the exact derivative of the explicit Euler map

    phi_{k+1} = phi_k + dt * (b(phi_k) + sigma(phi_k) eta_k),   F = f(phi_N),

so gradients and Hessians are mutually consistent at any resolution.
Gradients are reported as functional derivatives, i.e. the Euclidean
gradient divided by ``dt``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (Convention, DimensionError, DivergenceError, NoiseVector, Observable,
                   SdeSystem, StatePath, TimeGrid)


def _as_steps(eta, grid, n):
    data = eta.data if isinstance(eta, NoiseVector) else np.asarray(eta, dtype=float)
    if isinstance(eta, NoiseVector) and (eta.grid != grid or eta.dim != n):
        raise DimensionError("noise vector does not live on the requested grid")
    if data.size != grid.n_t * n:
        raise DimensionError(f"noise has {data.size} entries, expected {grid.n_t * n}")
    return data.reshape(grid.n_t, n)


def euler_step(system, x, eta_k, dt):
    """One explicit Euler step of the controlled ODE."""
    return x + dt * (system.drift(x) + system.diffusion(x) @ eta_k)


def _forward(system, grid, eta_steps):
    n, dt = system.dim, grid.dt
    phi = np.empty((grid.n_t + 1, n))
    phi[0] = system.x0
    x = system.x0
    with np.errstate(invalid="ignore", over="ignore"):
        for k in range(grid.n_t):
            x = euler_step(system, x, eta_steps[k], dt)
            if not np.all(np.isfinite(x)):
                raise DivergenceError(f"forward solve diverged at step {k + 1}", step=k + 1)
            phi[k + 1] = x
    return phi


def solve_forward(system: SdeSystem, obs: Observable, grid: TimeGrid, eta):
    """Return ``(phi, F)`` for the noise ``eta``."""
    phi = _forward(system, grid, _as_steps(eta, grid, system.dim))
    return StatePath(phi.reshape(-1), grid, system.dim), float(obs.value(phi[-1]))


@dataclass(frozen=True)
class GradientResult:
    grad: NoiseVector
    phi: StatePath
    theta: StatePath
    F: float


def _adjoint(system, obs, grid, eta_steps, phi, lam):
    """Discrete adjoint ``theta_k``; ``theta_N = lam grad f(phi_N)``."""
    n, dt = system.dim, grid.dt
    L = linear_propagator(system, phi[:-1], eta_steps)
    step_T = np.eye(n) + dt * np.transpose(L, (0, 2, 1))
    theta = np.empty((grid.n_t + 1, n))
    theta[-1] = lam * obs.gradient(phi[-1])
    p = theta[-1]
    for k in range(grid.n_t - 1, -1, -1):
        p = step_T[k] @ p
        theta[k] = p
    return theta


def linear_propagator(system, phi_steps, eta_steps):
    """``L[eta, phi] = grad b(phi) + (grad sigma(phi)) eta`` for each step."""
    return system.drift_jacobian(phi_steps) + np.einsum(
        "kilj,kl->kij", system.diffusion_jacobian(phi_steps), eta_steps)


def gradient(system: SdeSystem, obs: Observable, grid: TimeGrid, eta, lam: float):
    """Functional gradient of ``lam * F`` at ``eta`` (plus the adjoint path).

    ``grad_k = sigma(phi_k)^T theta_{k+1}``, which is the Euclidean gradient of
    the discrete map divided by ``dt``.
    """
    n = system.dim
    eta_steps = _as_steps(eta, grid, n)
    phi = _forward(system, grid, eta_steps)
    # trial points of a line search may leave the model's domain; the
    # optimizer treats the resulting non-finite values as rejections
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        theta = _adjoint(system, obs, grid, eta_steps, phi, lam)
        sig = system.diffusion(phi[:-1])
        g = np.einsum("kji,kj->ki", sig, theta[1:])
    return GradientResult(
        grad=NoiseVector(g.reshape(-1), grid, n),
        phi=StatePath(phi.reshape(-1), grid, n),
        theta=StatePath(theta.reshape(-1), grid, n),
        F=float(obs.value(phi[-1])),
    )


def value_and_gradient(system, obs, grid, eta_flat, lam=1.0):
    """Raw-array variant used by the optimizer: ``(F, dF/deta functional)``."""
    res = gradient(system, obs, grid, eta_flat, lam)
    return res.F, res.grad.data


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class SampleBatch:
    final: np.ndarray      # (n_samples, n) final states
    F: np.ndarray          # observable per sample; nan for diverged samples
    diverged: np.ndarray   # bool mask
    paths: np.ndarray | None = None  # (n_t+1, n_samples, n) if requested


def effective_drift(system, epsilon):
    """Ito drift used for sampling; adds the Stratonovich correction if needed."""
    if system.convention is Convention.STRATONOVICH:
        return lambda x: system.drift(x) + epsilon * system.strato_drift_correction(x)
    return system.drift


def sample_batch(system: SdeSystem, obs: Observable, grid: TimeGrid, epsilon: float,
                 n_samples: int, rng: np.random.Generator, keep_paths: bool = False):
    """Euler-Maruyama for ``n_samples`` independent paths at once.

    Samples whose state becomes non-finite are frozen and flagged as diverged.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    n, dt = system.dim, grid.dt
    b_eff = effective_drift(system, epsilon)
    amp = np.sqrt(epsilon * dt)
    x = np.broadcast_to(system.x0, (n_samples, n)).copy()
    alive = np.ones(n_samples, dtype=bool)
    paths = np.empty((grid.n_t + 1, n_samples, n)) if keep_paths else None
    if keep_paths:
        paths[0] = x
    with np.errstate(all="ignore"):
        for k in range(grid.n_t):
            xi = rng.standard_normal((n_samples, n))
            incr = dt * b_eff(x)
            if amp > 0:
                incr = incr + amp * np.einsum("sij,sj->si", system.diffusion(x), xi)
            x_new = x + incr
            ok = np.all(np.isfinite(x_new), axis=1)
            newly = alive & ~ok
            if newly.any():
                alive &= ok
            x = np.where(alive[:, None], x_new, x)
            if keep_paths:
                paths[k + 1] = x
        F = np.where(alive, obs.value(x), np.nan)
    return SampleBatch(final=x, F=F, diverged=~alive, paths=paths)


def sample_path(system: SdeSystem, obs: Observable, grid: TimeGrid, epsilon: float,
                rng: np.random.Generator):
    """A single Euler-Maruyama path ``(X, F)``.

    Raises :class:`DivergenceError` if the path blows up.
    """
    batch = sample_batch(system, obs, grid, epsilon, 1, rng, keep_paths=True)
    if batch.diverged[0]:
        raise DivergenceError("sample path diverged")
    X = batch.paths[:, 0, :]
    return StatePath(X.reshape(-1), grid, system.dim), float(batch.F[0])
