"""Domain types: SDE systems, observables, time grids and discretized paths.

Array conventions
-----------------
All callbacks must broadcast over leading batch axes, i.e. accept ``x`` of
shape ``(..., n)``.  Derivative axes are appended last:

* ``drift_jacobian(x)[..., i, j] = d_j b_i``
* ``drift_hessian(x)[..., i, j, k] = d_j d_k b_i``
* ``diffusion(x)[..., i, k] = sigma_ik``
* ``diffusion_jacobian(x)[..., i, k, j] = d_j sigma_ik``
* ``diffusion_hessian(x)[..., i, k, j, l] = d_j d_l sigma_ik``

Paths are stored flat, step-major and component-minor.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Array = np.ndarray


class Convention(str, enum.Enum):
    ITO = "ito"
    STRATONOVICH = "stratonovich"


class ModelError(ValueError):
    """A model callback returned something unusable."""


class DimensionError(ValueError):
    """Vectors or paths live on incompatible grids."""


class DivergenceError(FloatingPointError):
    """A time sweep produced a non-finite state."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_t: int

    def __post_init__(self):
        if int(self.n_t) != self.n_t or self.n_t < 2:
            raise ValueError(f"n_t must be an integer >= 2, got {self.n_t}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_t

    @property
    def times(self) -> Array:
        return np.arange(self.n_t + 1) * self.dt


@dataclass(frozen=True)
class SdeSystem:
    """Small-noise SDE ``dX = b(X) dt + sqrt(eps) sigma(X) dW`` on R^n."""

    dim: int
    drift: Callable[[Array], Array]
    diffusion: Callable[[Array], Array]
    drift_jacobian: Callable[[Array], Array]
    drift_hessian: Callable[[Array], Array]
    diffusion_jacobian: Callable[[Array], Array]
    diffusion_hessian: Callable[[Array], Array]
    x0: Array
    horizon: float
    convention: Convention = Convention.ITO
    name: str = "sde"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape != (self.dim,):
            raise DimensionError(f"x0 has shape {x0.shape}, expected ({self.dim},)")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "convention", Convention(self.convention))

    def grid(self, n_t: int) -> TimeGrid:
        return TimeGrid(self.horizon, n_t)

    def strato_drift_correction(self, x: Array) -> Array:
        """``1/2 sigma_jk d_j sigma_ik``; multiply by eps for the Ito drift."""
        return 0.5 * np.einsum("...jk,...ikj->...i", self.diffusion(x), self.diffusion_jacobian(x))


@dataclass(frozen=True)
class Observable:
    value: Callable[[Array], Array]
    gradient: Callable[[Array], Array]
    hessian: Callable[[Array], Array]
    name: str = "observable"


@dataclass(frozen=True)
class NoiseVector:
    """Discretized noise ``eta`` with the dt-weighted L2 inner product."""

    data: Array
    grid: TimeGrid
    dim: int = 1

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float).reshape(-1)
        if data.size != self.dim * self.grid.n_t:
            raise DimensionError(
                f"noise vector has {data.size} entries, expected {self.dim * self.grid.n_t}"
            )
        object.__setattr__(self, "data", data)

    @classmethod
    def zeros(cls, grid, dim):
        return cls(np.zeros(dim * grid.n_t), grid, dim)

    @classmethod
    def from_function(cls, fn, grid, dim=1):
        """Sample ``fn(t)`` at the left endpoints of the grid cells."""
        t = grid.times[:-1]
        vals = np.array([np.broadcast_to(fn(tk), (dim,)) for tk in t], dtype=float)
        return cls(vals.reshape(-1), grid, dim)

    def as_steps(self) -> Array:
        return self.data.reshape(self.grid.n_t, self.dim)

    def norm(self) -> float:
        return float(np.sqrt(inner_product(self, self)))

    def _like(self, data):
        return NoiseVector(data, self.grid, self.dim)

    def __add__(self, other):
        _check_same(self, other)
        return self._like(self.data + other.data)

    def __sub__(self, other):
        _check_same(self, other)
        return self._like(self.data - other.data)

    def __mul__(self, scalar):
        return self._like(self.data * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return self._like(-self.data)


@dataclass(frozen=True)
class StatePath:
    data: Array
    grid: TimeGrid
    dim: int = 1

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float).reshape(-1)
        if data.size != self.dim * (self.grid.n_t + 1):
            raise DimensionError(
                f"state path has {data.size} entries, expected {self.dim * (self.grid.n_t + 1)}"
            )
        object.__setattr__(self, "data", data)

    def as_steps(self) -> Array:
        return self.data.reshape(self.grid.n_t + 1, self.dim)

    @property
    def final(self) -> Array:
        return self.as_steps()[-1]


@dataclass(frozen=True)
class VariationState:
    """Second-order tangent/adjoint states for one direction ``deta``."""

    gamma1: StatePath
    zeta: StatePath
    zeta_sing: StatePath
    zeta_reg: StatePath
    L: Array  # (n_t, n, n)


def _check_same(u, v):
    if u.grid != v.grid or u.dim != v.dim:
        raise DimensionError(f"grid mismatch: {u.grid}/{u.dim} vs {v.grid}/{v.dim}")


def inner_product(u: NoiseVector, v: NoiseVector) -> float:
    """``dt * sum_k,i u_ki v_ki``."""
    _check_same(u, v)
    return float(u.grid.dt * np.dot(u.data, v.data))


# ---------------------------------------------------------------------------
# finite-difference derivative validation


@dataclass
class DerivativeReport:
    errors: dict
    threshold: float = 1e-4

    @property
    def flagged(self) -> list:
        return [k for k, v in self.errors.items() if v > self.threshold]

    @property
    def ok(self) -> bool:
        return not self.flagged

    def __str__(self):
        rows = [f"{k:>20s}: {v:.3e}{'  <-- FLAGGED' if v > self.threshold else ''}"
                for k, v in self.errors.items()]
        return "\n".join(rows)


def _checked_call(fn, x, label):
    out = np.asarray(fn(x), dtype=float)
    if not np.all(np.isfinite(out)):
        raise ModelError(f"{label} returned non-finite output at x={x!r}")
    return out


def _fd_jacobian(fn, x, label):
    """Central differences; derivative axis appended last."""
    h = 1e-5 * (1.0 + np.abs(x))
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h[j]
        cols.append((_checked_call(fn, x + e, label) - _checked_call(fn, x - e, label)) / (2 * h[j]))
    return np.stack(cols, axis=-1)


def _rel_err(approx, exact):
    scale = max(1.0, float(np.max(np.abs(exact))) if exact.size else 1.0)
    return float(np.max(np.abs(approx - exact))) / scale if exact.size else 0.0


def validate_derivatives(system: SdeSystem, obs: Observable, n_points: int = 10,
                         rng_seed: int = 0, scale: float = 0.1,
                         sampler: Callable | None = None) -> DerivativeReport:
    """Compare every derivative callback against central finite differences.

    States are drawn around ``x0`` (``x0 * (1 + scale * N(0,1))`` plus a small
    absolute jitter) unless ``sampler(rng) -> x`` is given.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(rng_seed)
    pairs = [
        ("drift_jacobian", system.drift, system.drift_jacobian),
        ("drift_hessian", system.drift_jacobian, system.drift_hessian),
        ("diffusion_jacobian", system.diffusion, system.diffusion_jacobian),
        ("diffusion_hessian", system.diffusion_jacobian, system.diffusion_hessian),
        ("obs_gradient", obs.value, obs.gradient),
        ("obs_hessian", obs.gradient, obs.hessian),
    ]
    errors = {name: 0.0 for name, _, _ in pairs}
    for _ in range(n_points):
        if sampler is not None:
            x = np.asarray(sampler(rng), dtype=float)
        else:
            x = system.x0 * (1 + scale * rng.standard_normal(system.dim)) \
                + 0.01 * scale * rng.standard_normal(system.dim)
        for name, parent, deriv in pairs:
            exact = _checked_call(deriv, x, name)
            approx = _fd_jacobian(parent, x, name)
            errors[name] = max(errors[name], _rel_err(approx, exact))
    return DerivativeReport(errors)
