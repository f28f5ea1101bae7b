"""L-BFGS with a strong-Wolfe line search, in an arbitrary inner product."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass
class LbfgsResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    gnorm: float
    iterations: int
    evaluations: int
    converged: bool
    message: str


def _safe_eval(fun, x):
    try:
        f, g = fun(x)
    except FloatingPointError:
        return np.inf, None
    if not np.isfinite(f) or g is None or not np.all(np.isfinite(g)):
        return np.inf, None
    return f, g


def _interpolate(a_lo, a_hi, f_lo, f_hi, d_lo):
    """Minimizer of the quadratic through (a_lo, f_lo, d_lo) and (a_hi, f_hi), safeguarded."""
    da = a_hi - a_lo
    denom = 2.0 * (f_hi - f_lo - d_lo * da)
    if denom != 0 and np.isfinite(denom):
        a = a_lo - d_lo * da * da / denom
        lo, hi = sorted((a_lo, a_hi))
        margin = 0.1 * (hi - lo)
        if lo + margin <= a <= hi - margin:
            return a
    return 0.5 * (a_lo + a_hi)


def wolfe_line_search(fun, dot, x, f0, g0, p, alpha0=1.0, c1=1e-4, c2=0.9,
                      max_evals=40, alpha_max=1e10):
    """Strong-Wolfe step length (Nocedal & Wright, alg. 3.5/3.6).

    Non-finite trial points (e.g. a diverging forward solve) are treated as
    infinitely bad and the step is cut back.  Near a minimizer, where changes
    of ``f`` drown in rounding, a step is also accepted under the approximate
    Wolfe conditions of Hager and Zhang.  Returns ``(alpha, f, g, evals)``;
    ``alpha`` is None on failure.
    """
    d0 = dot(g0, p)
    if d0 >= 0:
        return None, f0, g0, 0
    f_noise = 1e-12 * abs(f0)

    def approx_wolfe(f, d):
        return f <= f0 + f_noise and (2 * c1 - 1) * d0 >= d >= c2 * d0
    evals = 0
    a_prev, f_prev, d_prev = 0.0, f0, d0
    a = alpha0
    lo = hi = None
    while evals < max_evals:
        f, g = _safe_eval(fun, x + a * p)
        evals += 1
        if not np.isfinite(f):
            hi = (a, np.inf)
            lo = (a_prev, f_prev, d_prev)
            break
        d = dot(g, p)
        if approx_wolfe(f, d):
            return a, f, g, evals
        if f > f0 + c1 * a * d0 or (evals > 1 and f >= f_prev):
            lo, hi = (a_prev, f_prev, d_prev), (a, f)
            break
        if abs(d) <= -c2 * d0:
            return a, f, g, evals
        if d >= 0:
            lo, hi = (a, f, d), (a_prev, f_prev)
            break
        a_prev, f_prev, d_prev = a, f, d
        a = min(2.0 * a, alpha_max)
    else:
        return None, f0, g0, evals

    best = None
    while evals < max_evals:
        a_lo, f_lo, d_lo = lo
        a_hi, f_hi = hi
        if np.isfinite(f_hi):
            a = _interpolate(a_lo, a_hi, f_lo, f_hi, d_lo)
        else:
            a = a_lo + 0.25 * (a_hi - a_lo)
        f, g = _safe_eval(fun, x + a * p)
        evals += 1
        if not np.isfinite(f):
            hi = (a, np.inf)
            continue
        d = dot(g, p)
        if approx_wolfe(f, d):
            return a, f, g, evals
        if f > f0 + c1 * a * d0 or f >= f_lo:
            hi = (a, f)
        else:
            best = (a, f, g)
            if abs(d) <= -c2 * d0:
                return a, f, g, evals
            if d * (a_hi - a_lo) >= 0:
                hi = (a_lo, f_lo)
            lo = (a, f, d)
        if abs(hi[0] - lo[0]) < 1e-16 * max(1.0, abs(lo[0])):
            break
    if best is not None:
        # sufficient decrease holds; accept without curvature
        return best[0], best[1], best[2], evals
    return None, f0, g0, evals


def lbfgs(fun, x0, dot=np.dot, memory=10, max_iter=1000, grad_tol=1e-8,
          gtol_scale=None, callback=None):
    """Minimize ``fun(x) -> (f, g)``, ``g`` being the gradient w.r.t. ``dot``.

    Stops when ``sqrt(dot(g, g)) <= grad_tol * gtol_scale(x)`` (default scale
    ``max(1, |x|)``), after ``max_iter`` iterations, or when the line search
    can make no further progress.
    """
    if gtol_scale is None:
        def gtol_scale(x):
            return max(1.0, float(np.sqrt(dot(x, x))))

    x = np.array(x0, dtype=float)
    f, g = _safe_eval(fun, x)
    if not np.isfinite(f):
        raise FloatingPointError("objective is not finite at the initial point")
    evals = 1
    hist = deque(maxlen=memory)
    gnorm = float(np.sqrt(dot(g, g)))
    it = 0
    message = "max_iter reached"
    converged = False
    while it < max_iter:
        if gnorm <= grad_tol * gtol_scale(x):
            converged, message = True, "gradient tolerance met"
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(hist):
            a = rho * dot(s, q)
            alphas.append(a)
            q -= a * y
        if hist:
            s, y, _ = hist[-1]
            q *= dot(s, y) / dot(y, y)
        else:
            q *= min(1.0, 1.0 / gnorm)
        for (s, y, rho), a in zip(hist, reversed(alphas)):
            b = rho * dot(y, q)
            q += (a - b) * s
        p = -q
        if dot(g, p) >= 0:
            hist.clear()
            p = -g * min(1.0, 1.0 / gnorm)
        step, f_new, g_new, ne = wolfe_line_search(fun, dot, x, f, g, p)
        evals += ne
        if step is None:
            if hist:
                hist.clear()
                continue
            message = "line search failed"
            break
        x_new = x + step * p
        s, y = x_new - x, g_new - g
        sy = dot(s, y)
        if sy > 1e-12 * np.sqrt(dot(s, s) * dot(y, y)):
            hist.append((s, y, 1.0 / sy))
        x, f, g = x_new, f_new, g_new
        gnorm = float(np.sqrt(dot(g, g)))
        it += 1
        if callback is not None:
            callback(x, f, g)
    else:
        if gnorm <= grad_tol * gtol_scale(x):
            converged, message = True, "gradient tolerance met"
    return LbfgsResult(x, f, g, gnorm, it, evals, converged, message)
