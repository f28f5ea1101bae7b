"""Matrix-free second-variation operators on discretized noise space.

Three operators are implemented by separate sweeps at a linearization point
``(eta, phi, theta, lam)``:

* ``A``      full second variation of ``lam * F``,
* ``Atilde`` the singular part (only one integration between input and output),
* ``A - Atilde`` the regularized, trace-class part.

With ``J_k = I + dt L_k`` the Euler step Jacobian, ``W_k[i, l] =
sum_m d_i sigma_ml(phi_k) theta_{k+1, m}`` and ``H_k = <grad^2 b, theta_{k+1}>
+ <grad^2 sigma eta_k, theta_{k+1}>``, the discrete sweeps read

    gamma_{k+1} = J_k gamma_k + dt sigma_k deta_k,                 gamma_0 = 0
    zeta_k      = J_k^T zeta_{k+1} + dt (H_k gamma_k + W_k deta_k)
    (A deta)_k  = sigma_k^T zeta_{k+1} + W_k^T gamma_k

with ``zeta_N = lam grad^2 f gamma_N``.  ``zeta_sing`` keeps only the ``W_k``
source and a zero terminal value, ``zeta_reg`` everything else.
All applies accept a flat vector or a batch of column vectors.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import DimensionError, NoiseVector, StatePath, TimeGrid, VariationState
from .propagation import gradient, linear_propagator


class DegenerateReferenceError(ValueError):
    """Projection onto the complement of a zero vector was requested."""


@dataclass(frozen=True)
class Linearization:
    """Everything the operator sweeps need, precomputed along one instanton."""

    grid: TimeGrid
    dim: int
    lam: float
    eta: np.ndarray      # (n_t, n)
    phi: np.ndarray      # (n_t+1, n)
    theta: np.ndarray    # (n_t+1, n)
    sigma: np.ndarray    # (n_t, n, n)
    step: np.ndarray     # (n_t, n, n)  I + dt L_k
    W: np.ndarray        # (n_t, n, n)
    H: np.ndarray        # (n_t, n, n)
    terminal: np.ndarray  # (n, n) lam * hess f(phi_N)
    L: np.ndarray = field(repr=False, default=None)

    @property
    def size(self):
        return self.grid.n_t * self.dim

    def noise(self, data):
        return NoiseVector(data, self.grid, self.dim)


def linearize(system, obs, grid, eta, lam) -> Linearization:
    """Build the operator context at ``eta`` for multiplier ``lam``."""
    res = gradient(system, obs, grid, eta, lam)
    n, dt = system.dim, grid.dt
    eta_s = (eta.data if isinstance(eta, NoiseVector) else np.asarray(eta)).reshape(grid.n_t, n)
    phi = res.phi.as_steps()
    theta = res.theta.as_steps()
    x = phi[:-1]
    th1 = theta[1:]
    sig = system.diffusion(x)
    dsig = system.diffusion_jacobian(x)            # [k, m, l, i] = d_i sigma_ml
    L = linear_propagator(system, x, eta_s)
    W = np.einsum("kmli,km->kil", dsig, th1)
    H = np.einsum("kmij,km->kij", system.drift_hessian(x), th1) + np.einsum(
        "kmlij,kl,km->kij", system.diffusion_hessian(x), eta_s, th1)
    return Linearization(
        grid=grid, dim=n, lam=float(lam), eta=eta_s.copy(), phi=phi, theta=theta,
        sigma=sig, step=np.eye(n) + dt * L, W=W, H=0.5 * (H + np.transpose(H, (0, 2, 1))),
        terminal=lam * np.asarray(obs.hessian(phi[-1])).reshape(n, n), L=L,
    )


def _steps(ctx, v):
    v = np.asarray(v, dtype=float)
    batch = v.shape[1:] if v.ndim > 1 else ()
    if v.shape[0] != ctx.size:
        raise DimensionError(f"vector of length {v.shape[0]} does not match operator dim {ctx.size}")
    return v.reshape((ctx.grid.n_t, ctx.dim) + batch), batch


def _tangent(ctx, d):
    """gamma_k for k = 0..n_t (batched along trailing axes)."""
    dt = ctx.grid.dt
    gam = np.zeros((ctx.grid.n_t + 1,) + d.shape[1:])
    g = gam[0]
    src = dt * np.einsum("kij,kj...->ki...", ctx.sigma, d)
    step = ctx.step
    for k in range(ctx.grid.n_t):
        g = step[k] @ g + src[k]
        gam[k + 1] = g
    return gam


def _backward(ctx, src, terminal_value):
    """``zeta_k = J_k^T zeta_{k+1} + src_k`` from ``zeta_N = terminal_value``."""
    zeta = np.empty((ctx.grid.n_t + 1,) + terminal_value.shape)
    z = terminal_value
    zeta[-1] = z
    stepT = np.transpose(ctx.step, (0, 2, 1))
    for k in range(ctx.grid.n_t - 1, -1, -1):
        z = stepT[k] @ z + src[k]
        zeta[k] = z
    return zeta


def _output(ctx, zeta, gam, with_w=True):
    out = np.einsum("kji,kj...->ki...", ctx.sigma, zeta[1:])
    if with_w:
        out = out + np.einsum("kji,kj...->ki...", ctx.W, gam[:-1])
    return out


def _reg_sources(ctx, gam):
    return ctx.grid.dt * np.einsum("kij,kj...->ki...", ctx.H, gam[:-1]), \
        np.einsum("ij,j...->i...", ctx.terminal, gam[-1])


def _sing_sources(ctx, d):
    return ctx.grid.dt * np.einsum("kij,kj...->ki...", ctx.W, d)


def _finish(ctx, out, batch):
    return out.reshape((ctx.size,) + batch)


def _noise_io(fn):
    """Let an apply take a NoiseVector (and then return one) or raw arrays."""

    @functools.wraps(fn)
    def wrapper(ctx, deta):
        if isinstance(deta, NoiseVector):
            if deta.grid != ctx.grid or deta.dim != ctx.dim:
                raise DimensionError("direction does not live on the linearization grid")
            return ctx.noise(fn(ctx, deta.data))
        return fn(ctx, deta)

    return wrapper


@_noise_io
def hessian_apply(ctx: Linearization, deta):
    """``A deta``: exact second directional derivative of the discrete ``lam F``."""
    d, batch = _steps(ctx, deta)
    gam = _tangent(ctx, d)
    reg_src, reg_T = _reg_sources(ctx, gam)
    zeta = _backward(ctx, reg_src + _sing_sources(ctx, d), reg_T)
    return _finish(ctx, _output(ctx, zeta, gam), batch)


@_noise_io
def atilde_apply(ctx: Linearization, deta):
    """``Atilde deta = sigma^T zeta_sing + <theta, (grad sigma .) gamma>``."""
    d, batch = _steps(ctx, deta)
    gam = _tangent(ctx, d)
    zeta_sing = _backward(ctx, _sing_sources(ctx, d), np.zeros(gam.shape[1:]))
    return _finish(ctx, _output(ctx, zeta_sing, gam), batch)


@_noise_io
def regularized_apply(ctx: Linearization, deta):
    """``(A - Atilde) deta = sigma^T zeta_reg``."""
    d, batch = _steps(ctx, deta)
    gam = _tangent(ctx, d)
    reg_src, reg_T = _reg_sources(ctx, gam)
    zeta_reg = _backward(ctx, reg_src, reg_T)
    return _finish(ctx, _output(ctx, zeta_reg, gam, with_w=False), batch)


def variation_state(ctx: Linearization, deta) -> VariationState:
    """All intermediate sweeps for a single direction (diagnostics and tests)."""
    d, batch = _steps(ctx, deta)
    if batch:
        raise DimensionError("variation_state takes a single direction")
    gam = _tangent(ctx, d)
    reg_src, reg_T = _reg_sources(ctx, gam)
    sing_src = _sing_sources(ctx, d)
    zeta = _backward(ctx, reg_src + sing_src, reg_T)
    zs = _backward(ctx, sing_src, np.zeros(ctx.dim))
    zr = _backward(ctx, reg_src, reg_T)
    path = lambda a: StatePath(a.reshape(-1), ctx.grid, ctx.dim)  # noqa: E731
    return VariationState(gamma1=path(gam), zeta=path(zeta), zeta_sing=path(zs),
                          zeta_reg=path(zr), L=ctx.L)


# ---------------------------------------------------------------------------
# handles and projections


@dataclass(frozen=True)
class OperatorHandle:
    """A symmetric linear map on flat noise vectors of length ``dim``.

    ``apply`` accepts shape ``(dim,)`` or a batch ``(dim, b)``.  Calling the
    handle on a :class:`NoiseVector` returns a :class:`NoiseVector`.
    """

    apply: Callable[[np.ndarray], np.ndarray]
    dim: int
    grid: TimeGrid
    label: str = "operator"
    state_dim: int = 1

    def __call__(self, v):
        if isinstance(v, NoiseVector):
            return NoiseVector(self.apply(v.data), v.grid, v.dim)
        return self.apply(v)

    def matvec(self, v):
        return self.apply(v)

    def matrix(self):
        """Dense assembly from basis vectors (small instances only)."""
        return self.apply(np.eye(self.dim))


def _handle(ctx, fn, label):
    return OperatorHandle(apply=lambda v: fn(ctx, v), dim=ctx.size, grid=ctx.grid,
                          label=label, state_dim=ctx.dim)


def hessian_operator(ctx):
    return _handle(ctx, hessian_apply, "A")


def atilde_operator(ctx):
    return _handle(ctx, atilde_apply, "Atilde")


def regularized_operator(ctx):
    return _handle(ctx, regularized_apply, "A-Atilde")


def project_perp(eta_ref, v):
    """Remove the ``eta_ref`` component of ``v`` (dt-weighted inner product).

    Accepts :class:`NoiseVector` pairs or raw flat arrays (``v`` may be a batch).
    """
    if isinstance(eta_ref, NoiseVector):
        ref = eta_ref.data
    else:
        ref = np.asarray(eta_ref, dtype=float)
    nrm2 = float(ref @ ref)
    if not nrm2 > 0:
        raise DegenerateReferenceError("cannot project against a zero reference vector")
    if isinstance(v, NoiseVector):
        return NoiseVector(_proj(ref, nrm2, v.data), v.grid, v.dim)
    return _proj(ref, nrm2, np.asarray(v, dtype=float))


def _proj(ref, nrm2, v):
    # the dt weights cancel in the ratio
    coef = np.tensordot(ref, v, axes=(0, 0)) / nrm2
    return v - np.multiply.outer(ref, coef) if v.ndim > 1 else v - coef * ref


def compose_projected(op: OperatorHandle, eta_ref) -> OperatorHandle:
    """``pr o op o pr`` with ``pr`` the projector onto ``eta_ref``-perp."""
    ref = eta_ref.data if isinstance(eta_ref, NoiseVector) else np.asarray(eta_ref, float)
    nrm2 = float(ref @ ref)
    if not nrm2 > 0:
        raise DegenerateReferenceError("cannot project against a zero reference vector")

    def apply(v):
        return _proj(ref, nrm2, op.apply(_proj(ref, nrm2, np.asarray(v, float))))

    return OperatorHandle(apply=apply, dim=op.dim, grid=op.grid, label=f"pr {op.label} pr",
                          state_dim=op.state_dim)


def diagonal_operator(values, grid=None, label="diag"):
    """Synthetic operator with the given eigenvalues (testing aid)."""
    values = np.asarray(values, dtype=float)
    grid = grid or TimeGrid(1.0, max(values.size, 2))

    def apply(v):
        v = np.asarray(v, dtype=float)
        return values[:, None] * v if v.ndim > 1 else values * v

    return OperatorHandle(apply=apply, dim=values.size, grid=grid, label=label)


def matrix_operator(matrix, grid=None, label="matrix"):
    """Wrap a dense symmetric matrix as an operator handle."""
    matrix = np.asarray(matrix, dtype=float)
    grid = grid or TimeGrid(1.0, max(matrix.shape[0], 2))
    return OperatorHandle(apply=lambda v: matrix @ v, dim=matrix.shape[0], grid=grid, label=label)
