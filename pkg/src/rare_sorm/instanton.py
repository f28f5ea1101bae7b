"""Instanton (design point) solvers.

The constrained problem ``min 1/2 |eta|^2  s.t.  F[eta] = z`` is handled with
an augmented Lagrangian

    L(eta) = 1/2 |eta|^2 - lam (F - z) + mu/2 (F - z)^2,

minimizing over ``eta`` with L-BFGS for an increasing sequence of ``mu`` and
updating ``lam <- lam - mu (F - z)`` after every outer step.  The MGF variant
minimizes ``1/2 |eta|^2 - lam F`` directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .core import NoiseVector, StatePath, TimeGrid, inner_product
from .optimize import lbfgs
from .propagation import gradient

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InstantonSolution:
    eta_z: NoiseVector
    phi_z: StatePath
    theta_z: StatePath
    lambda_z: float
    rate: float
    achieved_z: float
    target_z: float
    iterations: int
    converged: bool
    optimality_residual: float = 0.0
    outer_iterations: int = 0

    @property
    def constraint_error(self):
        return _rel_gap(self.achieved_z, self.target_z)


@dataclass(frozen=True)
class OptimizerConfig:
    mu_schedule: tuple = (1.0, 10.0, 100.0, 1e3, 1e4, 1e5)
    lbfgs_memory: int = 10
    lbfgs_max_iter: int = 2000
    grad_tol: float = 1e-6
    constraint_tol: float = 1e-3
    initial_eta: NoiseVector | None = None
    initial_lambda: float = 0.0

    def __post_init__(self):
        mus = tuple(float(m) for m in self.mu_schedule)
        if not mus or any(m <= 0 for m in mus) or any(b <= a for a, b in zip(mus, mus[1:])):
            raise ValueError("mu_schedule must be a non-empty, strictly increasing sequence of positive numbers")
        if not (self.grad_tol > 0 and self.constraint_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.lbfgs_memory < 1 or self.lbfgs_max_iter < 1:
            raise ValueError("lbfgs_memory and lbfgs_max_iter must be >= 1")
        object.__setattr__(self, "mu_schedule", mus)


class InstantonError(RuntimeError):
    """The solver ran out of budget; ``best`` holds the last iterate."""

    def __init__(self, message, best: InstantonSolution | None = None):
        super().__init__(message)
        self.best = best


def _rel_gap(achieved, target):
    return abs(achieved - target) / max(abs(target), 1e-300) if target != 0 else abs(achieved)


def _initial_eta(config, grid, n):
    eta = config.initial_eta
    if eta is None:
        return np.zeros(grid.n_t * n)
    if isinstance(eta, NoiseVector):
        if eta.grid == grid and eta.dim == n:
            return eta.data.copy()
        return _resample(eta, grid).data
    return np.asarray(eta, dtype=float).reshape(-1).copy()


def _resample(eta: NoiseVector, grid: TimeGrid) -> NoiseVector:
    """Piecewise-constant transfer of a warm start onto another grid."""
    src = eta.as_steps()
    idx = np.minimum((grid.times[:-1] / eta.grid.dt + 1e-9).astype(int), eta.grid.n_t - 1)
    return NoiseVector(src[idx].reshape(-1), grid, eta.dim)


def _solution(system, obs, grid, eta, lam, target, iterations, converged, outer):
    res = gradient(system, obs, grid, eta, 1.0)
    n = system.dim
    eta_v = NoiseVector(eta, grid, n)
    theta = StatePath(lam * res.theta.data, grid, n)
    rate = 0.5 * inner_product(eta_v, eta_v)
    resid_vec = NoiseVector(eta - lam * res.grad.data, grid, n)
    nrm = eta_v.norm()
    resid = resid_vec.norm() / nrm if nrm > 0 else resid_vec.norm()
    return InstantonSolution(
        eta_z=eta_v, phi_z=res.phi, theta_z=theta, lambda_z=float(lam), rate=rate,
        achieved_z=res.F, target_z=float(target), iterations=int(iterations),
        converged=bool(converged), optimality_residual=float(resid), outer_iterations=outer,
    )


def _weighted_dot(dt):
    return lambda u, v: dt * float(np.dot(u, v))


def _rel_scale(dot):
    # relative gradient tolerance; the floor keeps eta = 0 starts meaningful
    return lambda x: max(float(np.sqrt(dot(x, x))), 1e-3)


def find_instanton(system, obs, grid: TimeGrid, z: float, config: OptimizerConfig | None = None):
    """Constrained minimizer of ``1/2 |eta|^2`` subject to ``F[eta] = z``."""
    config = config or OptimizerConfig()
    n, dt = system.dim, grid.dt
    eta0 = NoiseVector.zeros(grid, n).data
    F0 = gradient(system, obs, grid, eta0, 1.0).F
    if _rel_gap(F0, z) <= config.constraint_tol and config.initial_eta is None:
        return _solution(system, obs, grid, eta0, 0.0, z, 0, True, 0)

    dot = _weighted_dot(dt)
    eta = _initial_eta(config, grid, n)
    lam = float(config.initial_lambda)
    total_iter = 0
    outer = 0
    best = None
    for mu in config.mu_schedule:
        outer += 1

        def fun(x, lam=lam, mu=mu):
            r = gradient(system, obs, grid, x, 1.0)
            c = r.F - z
            val = 0.5 * dot(x, x) - lam * c + 0.5 * mu * c * c
            return val, x - (lam - mu * c) * r.grad.data

        res = lbfgs(fun, eta, dot=dot, memory=config.lbfgs_memory,
                    max_iter=config.lbfgs_max_iter, grad_tol=config.grad_tol,
                    gtol_scale=_rel_scale(dot))
        total_iter += res.iterations
        eta = res.x
        F = gradient(system, obs, grid, eta, 1.0).F
        lam = lam - mu * (F - z)
        best = _solution(system, obs, grid, eta, lam, z, total_iter, False, outer)
        log.debug("mu=%g lam=%.8g F=%.8g gap=%.2e resid=%.2e iters=%d (%s)", mu, lam, F,
                  best.constraint_error, best.optimality_residual, res.iterations, res.message)
        if best.constraint_error <= config.constraint_tol and \
                best.optimality_residual <= config.grad_tol:
            return replace(best, converged=True)
    raise InstantonError(
        f"instanton for z={z} not converged: constraint gap {best.constraint_error:.2e} "
        f"(tol {config.constraint_tol:g}), optimality residual {best.optimality_residual:.2e} "
        f"(tol {config.grad_tol:g}) after {total_iter} L-BFGS iterations", best=best)


def find_instanton_mgf(system, obs, grid: TimeGrid, lam: float, config: OptimizerConfig | None = None):
    """Unconstrained minimizer of ``1/2 |eta|^2 - lam F[eta]``."""
    config = config or OptimizerConfig()
    n, dt = system.dim, grid.dt
    dot = _weighted_dot(dt)
    eta = _initial_eta(config, grid, n)
    if lam == 0 and config.initial_eta is None:
        F0 = gradient(system, obs, grid, eta, 1.0).F
        return _solution(system, obs, grid, eta, 0.0, F0, 0, True, 0)

    def fun(x):
        r = gradient(system, obs, grid, x, 1.0)
        return 0.5 * dot(x, x) - lam * r.F, x - lam * r.grad.data

    res = lbfgs(fun, eta, dot=dot, memory=config.lbfgs_memory,
                max_iter=config.lbfgs_max_iter, grad_tol=config.grad_tol,
                gtol_scale=_rel_scale(dot))
    F = gradient(system, obs, grid, res.x, 1.0).F
    sol = _solution(system, obs, grid, res.x, lam, F, res.iterations, False, 1)
    if sol.optimality_residual > config.grad_tol:
        raise InstantonError(
            f"MGF instanton for lambda={lam} not converged: optimality residual "
            f"{sol.optimality_residual:.2e} ({res.message})", best=sol)
    return replace(sol, converged=True)


@dataclass
class ScanResult:
    """Outcome of a continuation scan; failed entries hold ``None``."""

    z_values: list
    solutions: list
    errors: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.solutions)

    def __len__(self):
        return len(self.solutions)

    def __getitem__(self, i):
        return self.solutions[i]

    @property
    def total_iterations(self):
        return sum(s.iterations for s in self.solutions if s is not None)


def rate_function_scan(system, obs, grid: TimeGrid, z_values, config: OptimizerConfig | None = None,
                       warm_start: bool = True) -> ScanResult:
    """Solve for each ``z`` in turn, warm-starting from the previous success."""
    z_values = list(z_values)
    if not z_values:
        raise ValueError("z_values must be non-empty")
    base = config or OptimizerConfig()
    cfg = base
    sols, errors = [], {}
    for i, z in enumerate(z_values):
        try:
            sol = find_instanton(system, obs, grid, z, cfg)
        except (InstantonError, FloatingPointError) as exc:
            log.warning("scan: z=%g failed: %s", z, exc)
            errors[i] = exc
            sols.append(None)
            continue
        sols.append(sol)
        if warm_start and sol.rate > 0:
            cfg = replace(base, initial_eta=sol.eta_z, initial_lambda=sol.lambda_z)
    return ScanResult(z_values, sols, errors)
