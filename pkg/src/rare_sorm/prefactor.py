"""Prefactors of sharp large-deviation estimates.

For a tail probability ``P(F >= z) ~ sqrt(eps/2pi) C(z) exp(-I(z)/eps)`` with
multiplicative noise the prefactor reads

    C = [2 I det2(Id - pr A pr)]^(-1/2)
        * exp(1/2 tr[pr (A - Atilde) pr] - 1/2 <e, Atilde e> + s),

``pr`` projecting onto the complement of ``e = eta_z / |eta_z|`` and ``s`` the
extra term for Stratonovich noise (zero for Ito).  For the MGF
``E exp(lam F / eps) ~ R_lam exp(I*(lam)/eps)`` one has
``R = det2(Id - A)^(-1/2) exp(1/2 tr[A - Atilde])``.
All products and exponentials are evaluated in log space.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Convention, NoiseVector
from .operators import (atilde_apply, atilde_operator, compose_projected, hessian_operator,
                        linearize, regularized_operator)
from .spectrum import dense_spectrum, leading_eigenvalues

log = logging.getLogger(__name__)

VALIDITY_MARGIN = 1e-10


class NondegeneracyError(ValueError):
    """An eigenvalue of the operator inside a determinant reached 1.

    ``code`` is ``"eigenvalue_one"`` for an eigenvalue exactly equal to 1 and
    ``"eigenvalue_above_one"`` otherwise.
    """

    def __init__(self, message, eigenvalue, code):
        super().__init__(message)
        self.eigenvalue = float(eigenvalue)
        self.code = code


def _check_below_one(mu):
    mu = np.asarray(mu, dtype=float)
    if mu.size and np.any(mu >= 1.0):
        worst = float(mu.max())
        code = "eigenvalue_one" if worst == 1.0 else "eigenvalue_above_one"
        raise NondegeneracyError(f"eigenvalue {worst!r} >= 1: Id - B is singular or indefinite",
                                 worst, code)
    return mu


def log_carleman_fredholm_det(eigenvalues) -> float:
    mu = _check_below_one(eigenvalues)
    return float(np.sum(np.log1p(-mu) + mu))


def carleman_fredholm_det(eigenvalues) -> float:
    """``det2(Id - B) = prod (1 - mu_i) exp(mu_i)``."""
    return float(np.exp(log_carleman_fredholm_det(eigenvalues)))


def log_fredholm_det(eigenvalues) -> float:
    mu = _check_below_one(eigenvalues)
    return float(np.sum(np.log1p(-mu)))


def fredholm_det(eigenvalues) -> float:
    """``det(Id - B) = prod (1 - mu_i)``."""
    return float(np.exp(log_fredholm_det(eigenvalues)))


def truncation_profile(eigenvalues) -> np.ndarray:
    """``|log det2(m) - log det2(M)|`` for ``m = 1..M`` (eigenvalues by descending modulus)."""
    terms = np.log1p(-_check_below_one(eigenvalues)) + np.asarray(eigenvalues, dtype=float)
    partial = np.cumsum(terms)
    return np.abs(partial - partial[-1]) if partial.size else partial


# ---------------------------------------------------------------------------
# traces


def _spectrum(op, M, tol, seed, dense):
    if dense:
        return dense_spectrum(op)
    return leading_eigenvalues(op, min(M, op.dim - 1), tol=tol, seed=seed)


def trace_by_eigensum(op, M: int, tol: float = 1e-8, seed: int = 0) -> float:
    """Sum of the ``M`` eigenvalues of largest modulus."""
    if M < 1:
        raise ValueError("M must be >= 1")
    return float(np.sum(_spectrum(op, M, tol, seed, False).eigenvalues))


def hutchinson_trace(op, n_samples: int, rng: np.random.Generator, batch: int = 64):
    """Hutchinson estimate ``(mean, std error)`` with ``N(0, 1/dt)`` probes.

    Each sample is ``dt <xi, D xi>``, an unbiased estimate of ``tr D``.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    dt = op.grid.dt
    samples = np.empty(n_samples)
    done = 0
    while done < n_samples:
        b = min(batch, n_samples - done)
        xi = rng.standard_normal((op.dim, b)) / np.sqrt(dt)
        Dxi = np.asarray(op.apply(xi)).reshape(op.dim, b)
        samples[done:done + b] = dt * np.einsum("ib,ib->b", xi, Dxi)
        done += b
    return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(n_samples))


# ---------------------------------------------------------------------------
# prefactors


@dataclass
class PrefactorBreakdown:
    lambda_z: float
    I_z: float
    det2_projected: float
    trace_reg_projected: float
    quad_atilde: float
    strato_correction: float
    C: float
    M_used: int
    valid: bool = True
    log_C: float = float("nan")
    matvec_count: int = 0
    eigenvalues_projected: np.ndarray = field(default=None, repr=False)
    eigenvalues_regularized: np.ndarray = field(default=None, repr=False)

    @property
    def truncation_profile(self):
        return truncation_profile(self.eigenvalues_projected)

    def row(self) -> dict:
        return {"lambda_z": self.lambda_z, "I_z": self.I_z,
                "det2_projected": self.det2_projected,
                "trace_reg_projected": self.trace_reg_projected,
                "quad_atilde": self.quad_atilde, "strato_correction": self.strato_correction,
                "C_z": self.C, "M": self.M_used, "valid": self.valid}

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("eigenvalues_projected", "eigenvalues_regularized"):
            v = d[key]
            d[key] = None if v is None else [float(x) for x in v]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("eigenvalues_projected", "eigenvalues_regularized"):
            if d.get(key) is not None:
                d[key] = np.asarray(d[key], dtype=float)
        return cls(**d)


def strato_correction(system, sol) -> float:
    """``1/2 int sigma_jk d_j sigma_ik theta_i dt`` for Stratonovich systems, else 0."""
    if system.convention is not Convention.STRATONOVICH:
        return 0.0
    grid = sol.eta_z.grid
    phi = sol.phi_z.as_steps()[:-1]
    theta = sol.theta_z.as_steps()[:-1]
    corr = system.strato_drift_correction(phi)      # already carries the 1/2
    return float(grid.dt * np.sum(corr * theta))


def _unit(eta: NoiseVector):
    nrm = eta.norm()
    if not nrm > 0:
        raise ValueError("the instanton is trivial (eta_z = 0); the prefactor is undefined")
    return eta.data / nrm


def compute_prefactor(system, obs, grid, sol, M: int = 200, tol: float = 1e-8, seed: int = 0,
                      dense: bool = False, strict: bool = True) -> PrefactorBreakdown:
    """Prefactor ``C(z)`` with every intermediate term.

    With ``strict`` a projected eigenvalue ``>= 1`` raises
    :class:`NondegeneracyError`; otherwise the breakdown is returned with
    ``valid=False``.  Eigenvalues within ``1e-10`` of 1 are always flagged.
    """
    e = _unit(sol.eta_z)
    ctx = linearize(system, obs, grid, sol.eta_z, sol.lambda_z)
    pA = compose_projected(hessian_operator(ctx), sol.eta_z)
    pR = compose_projected(regularized_operator(ctx), sol.eta_z)
    spec_A = _spectrum(pA, M, tol, seed, dense)
    spec_R = _spectrum(pR, M, tol, seed + 1, dense)
    mu = spec_A.eigenvalues
    quad = float(grid.dt * e @ atilde_apply(ctx, e))
    trace = float(np.sum(spec_R.eigenvalues))
    strato = strato_correction(system, sol)
    I = sol.rate
    valid = bool(spec_A.converged and spec_R.converged and np.all(mu < 1.0 - VALIDITY_MARGIN))
    try:
        logdet = log_carleman_fredholm_det(mu)
    except NondegeneracyError:
        if strict:
            raise
        logdet = float("nan")
        valid = False
    log_C = -0.5 * (np.log(2 * I) + logdet) + 0.5 * trace - 0.5 * quad + strato
    if not valid:
        log.warning("prefactor flagged invalid: max projected eigenvalue %.12g, converged %s/%s",
                    float(mu.max()), spec_A.converged, spec_R.converged)
    return PrefactorBreakdown(
        lambda_z=sol.lambda_z, I_z=I, det2_projected=float(np.exp(logdet)),
        trace_reg_projected=trace, quad_atilde=quad, strato_correction=strato,
        C=float(np.exp(log_C)), M_used=len(mu), valid=valid, log_C=float(log_C),
        matvec_count=spec_A.matvec_count + spec_R.matvec_count + 1,
        eigenvalues_projected=mu, eigenvalues_regularized=spec_R.eigenvalues,
    )


@dataclass
class MgfPrefactor:
    R: float
    log_R: float
    det2: float
    trace_reg: float
    strato_correction: float
    eigenvalues: np.ndarray = field(repr=False, default=None)


def compute_mgf_prefactor(system, obs, grid, sol, M: int = 50, tol: float = 1e-8, seed: int = 0,
                          dense: bool = False, details: bool = False):
    """``R_lam = det2(Id - A)^(-1/2) exp(1/2 tr[A - Atilde] + s)`` at ``(eta, lam)`` of ``sol``."""
    if sol.lambda_z == 0:
        out = MgfPrefactor(1.0, 0.0, 1.0, 0.0, 0.0, np.zeros(0))
        return out if details else out.R
    ctx = linearize(system, obs, grid, sol.eta_z, sol.lambda_z)
    spec_A = _spectrum(hessian_operator(ctx), M, tol, seed, dense)
    spec_R = _spectrum(regularized_operator(ctx), M, tol, seed + 1, dense)
    logdet = log_carleman_fredholm_det(spec_A.eigenvalues)
    trace = float(np.sum(spec_R.eigenvalues))
    strato = strato_correction(system, sol)
    log_R = -0.5 * logdet + 0.5 * trace + strato
    out = MgfPrefactor(float(np.exp(log_R)), float(log_R), float(np.exp(logdet)), trace, strato,
                       spec_A.eigenvalues)
    return out if details else out.R


def naive_discrete_prefactor(system, obs, grid, sol, m: int, tol: float = 1e-8, seed: int = 0,
                             dense: bool = False) -> float:
    """``[2 I det(Id - pr A pr)]^(-1/2)`` from the ``m`` leading eigenvalues.

    This is the finite-dimensional formula applied to the discretized problem.
    It does not converge as ``n_t`` grows for multiplicative noise.
    """
    ctx = linearize(system, obs, grid, sol.eta_z, sol.lambda_z)
    pA = compose_projected(hessian_operator(ctx), sol.eta_z)
    spec = _spectrum(pA, m, tol, seed, dense)
    mu = spec.eigenvalues[:m]
    return float(np.exp(-0.5 * (np.log(2 * sol.rate) + log_fredholm_det(mu))))


def naive_mgf_prefactor(system, obs, grid, sol, m: int, tol: float = 1e-8, seed: int = 0,
                        dense: bool = False) -> float:
    """``det(Id - A)^(-1/2)`` from the ``m`` leading eigenvalues (MGF analogue)."""
    ctx = linearize(system, obs, grid, sol.eta_z, sol.lambda_z)
    spec = _spectrum(hessian_operator(ctx), m, tol, seed, dense)
    return float(np.exp(-0.5 * log_fredholm_det(spec.eigenvalues[:m])))


# ---------------------------------------------------------------------------
# probabilities


def log_tail_probability(epsilon: float, rate, breakdown) -> float:
    """``log P ~ 1/2 log(eps / 2pi) + log C - I / eps``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    I = getattr(rate, "rate", rate)
    log_C = getattr(breakdown, "log_C", float("nan"))
    if not np.isfinite(log_C):
        log_C = np.log(getattr(breakdown, "C", breakdown))
    return float(0.5 * np.log(epsilon / (2 * np.pi)) + log_C - I / epsilon)


def tail_probability(epsilon: float, rate, breakdown) -> float:
    """Leading-order tail probability.

    ``rate`` may be an :class:`~rare_sorm.instanton.InstantonSolution` or
    ``I(z)``; ``breakdown`` a :class:`PrefactorBreakdown` or ``C`` itself.
    """
    return float(np.exp(log_tail_probability(epsilon, rate, breakdown)))


def second_derivative(x, y):
    """Three-point second derivatives at interior nodes of a non-uniform grid."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    h0, h1 = x[1:-1] - x[:-2], x[2:] - x[1:-1]
    return 2 * (h0 * y[2:] - (h0 + h1) * y[1:-1] + h1 * y[:-2]) / (h0 * h1 * (h0 + h1))


def tail_prefactor_via_mgf(scan, mgf_prefactors):
    """``C(z) = R_{lam_z} sqrt(I''(z)) / lam_z`` at interior scan points.

    ``I''`` comes from a three-point difference of the rate over the achieved
    observable values.  Endpoints, failed solves and points with ``I'' <= 0``
    get ``nan``; non-convex points are logged.
    """
    sols = list(scan)
    R = list(mgf_prefactors)
    if len(sols) < 3 or len(R) != len(sols):
        raise ValueError("need >= 3 scan points and one MGF prefactor per point")
    out = [float("nan")] * len(sols)
    for i in range(1, len(sols) - 1):
        trio = sols[i - 1:i + 2]
        if any(s is None for s in trio) or R[i] is None:
            continue
        d2 = second_derivative([s.achieved_z for s in trio], [s.rate for s in trio])[0]
        if not d2 > 0:
            log.warning("I''(%g) = %.3g <= 0: MGF route skipped (non-convex rate function)",
                        trio[1].target_z, d2)
            continue
        out[i] = float(R[i] * np.sqrt(d2) / trio[1].lambda_z)
    return out


# ---------------------------------------------------------------------------
# export

TABLE_COLUMNS = ["lambda_z", "I_z", "det2_projected", "trace_reg_projected", "quad_atilde",
                 "strato_correction", "C_z", "M", "valid"]


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def write_breakdown_csv(breakdowns, path, extra=None):
    """One row per breakdown; ``extra`` is an optional list of dicts prepended to each row."""
    breakdowns = list(breakdowns) if not isinstance(breakdowns, PrefactorBreakdown) else [breakdowns]
    extra = extra or [{}] * len(breakdowns)
    keys = list(extra[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + TABLE_COLUMNS)
        for ex, b in zip(extra, breakdowns):
            row = b.row()
            w.writerow([_fmt(ex[k]) for k in keys] + [_fmt(row[c]) for c in TABLE_COLUMNS])


def write_breakdown_json(breakdown: PrefactorBreakdown, path):
    with open(path, "w") as fh:
        json.dump(breakdown.to_dict(), fh, indent=2, default=float)
