"""Leading eigenvalues of matrix-free symmetric operators.

``leading_eigenvalues`` is a thick-restart Lanczos method with full
reorthogonalization.  The discretized noise space carries the inner product
``dt * <u, v>``; since that is a constant multiple of the Euclidean one, the
operators are symmetric in both and plain dot products are used.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

DENSE_CAP = 4096
# Eigenvalues below this modulus are treated as zero when judging convergence.
# Operators here act on noise with O(1) eigenvalues measured against 1.
ABS_FLOOR = 1e-12


class OperatorAsymmetryError(ValueError):
    """The operator failed a symmetry probe."""


@dataclass
class SpectrumResult:
    eigenvalues: np.ndarray
    requested: int
    matvec_count: int
    residuals: np.ndarray
    converged: bool = True
    restarts: int = 0
    asymmetry: float = 0.0
    eigenvectors: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.eigenvalues)


def _order(vals):
    return np.argsort(-np.abs(vals), kind="stable")


class _Counter:
    def __init__(self, op):
        self.op = op
        self.count = 0

    def __call__(self, v):
        self.count += 1 if v.ndim == 1 else v.shape[1]
        return np.asarray(self.op.apply(v), dtype=float)


def symmetry_probe(op, rng, apply=None):
    """Asymmetry ``|<u,Av> - <Au,v>|`` relative to ``|Au||v| + |Av||u|``.

    The denominator is floored at ``|u||v|`` so that an operator that is
    numerically zero does not register rounding noise as asymmetry.
    """
    apply = apply or op.apply
    uv = rng.standard_normal((op.dim, 2))
    Auv = apply(uv)
    lhs = uv[:, 0] @ Auv[:, 1]
    rhs = Auv[:, 0] @ uv[:, 1]
    nu, nv = np.linalg.norm(uv[:, 0]), np.linalg.norm(uv[:, 1])
    scale = max(np.linalg.norm(Auv[:, 0]) * nv + np.linalg.norm(Auv[:, 1]) * nu, nu * nv)
    return abs(lhs - rhs) / scale


def leading_eigenvalues(op, M: int, tol: float = 1e-8, max_iter: int = 200, seed: int = 0,
                        basis_size: int | None = None, symmetry_tol: float = 1e-8,
                        keep: int | None = None, verify: bool = False) -> SpectrumResult:
    """The ``M`` eigenvalues of largest modulus of a symmetric operator.

    ``max_iter`` caps the number of restart cycles.  A pair is converged when
    its residual satisfies ``|A v - mu v| <= tol * max(|mu|, ABS_FLOOR)``; the
    reported residuals are ``|A v - mu v| / max(|mu|, ABS_FLOOR)``, taken from
    the Lanczos relation, or recomputed by explicit products if ``verify``.
    """
    n = op.dim
    if not 1 <= M < n:
        raise ValueError(f"need 1 <= M < dim, got M={M}, dim={n}")
    rng = np.random.default_rng(seed)
    A = _Counter(op)
    asym = symmetry_probe(op, rng, A)
    if asym > symmetry_tol:
        raise OperatorAsymmetryError(f"operator {op.label!r} is not symmetric (probe {asym:.2e})")

    m = min(basis_size or max(2 * M + 20, 100), n)
    keep_target = min(m - 1, keep if keep is not None else M + (m - M) // 2)
    V = np.zeros((n, m))
    H = np.zeros((m, m))
    v = rng.standard_normal(n)
    V[:, 0] = v / np.linalg.norm(v)
    k = 0          # columns of V fixed from a previous cycle
    restarts = 0
    beta, f = 0.0, np.zeros(n)
    while True:
        for j in range(k, m):
            w = A(V[:, j])
            h = V[:, :j + 1].T @ w
            w -= V[:, :j + 1] @ h
            h2 = V[:, :j + 1].T @ w
            w -= V[:, :j + 1] @ h2
            H[:j + 1, j] = h + h2
            beta = float(np.linalg.norm(w))
            if j + 1 == m:
                f = w
                break
            if beta <= 1e-12 * max(1.0, np.abs(H[:j + 1, :j + 1]).max()):
                # invariant subspace; continue with a fresh orthogonal direction
                w = rng.standard_normal(n)
                for _ in range(2):
                    w -= V[:, :j + 1] @ (V[:, :j + 1].T @ w)
                w /= np.linalg.norm(w)
            else:
                w /= beta
            V[:, j + 1] = w
        T = np.triu(H) + np.triu(H, 1).T
        theta, S = np.linalg.eigh(T)
        order = _order(theta)
        theta, S = theta[order], S[:, order]
        ritz_res = np.abs(beta * S[-1, :])
        scale = np.maximum(np.abs(theta), ABS_FLOOR)
        done = ritz_res[:M] <= tol * scale[:M]
        if m == n or done.all() or restarts >= max_iter:
            break
        restarts += 1
        k = keep_target
        Vk = V @ S[:, :k]
        V[:, :k] = Vk
        H[:] = 0.0
        H[np.arange(k), np.arange(k)] = theta[:k]
        V[:, k] = f / beta
        V[:, k + 1:] = 0.0

    vecs = V @ S[:, :M]
    vals = theta[:M]
    if verify:
        Av = A(vecs)
        res = np.linalg.norm(Av - vecs * vals, axis=0) / np.maximum(np.abs(vals), ABS_FLOOR)
    else:
        res = ritz_res[:M] / scale[:M]
    converged = bool(m == n or done.all())
    return SpectrumResult(eigenvalues=vals.copy(), requested=M, matvec_count=A.count,
                          residuals=res, converged=converged, restarts=restarts,
                          asymmetry=float(asym), eigenvectors=vecs)


def dense_spectrum(op, cap: int = DENSE_CAP) -> SpectrumResult:
    """Assemble the full matrix by basis applications and diagonalize it."""
    if op.dim > cap:
        raise ValueError(f"operator dimension {op.dim} exceeds the dense cap {cap}; "
                         "use leading_eigenvalues or raise the cap explicitly")
    mat = np.asarray(op.apply(np.eye(op.dim)), dtype=float)
    asym = float(np.max(np.abs(mat - mat.T))) if mat.size else 0.0
    mat = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(mat)
    order = _order(vals)
    vals, vecs = vals[order], vecs[:, order]
    res = np.linalg.norm(mat @ vecs - vecs * vals, axis=0) / np.maximum(np.abs(vals), ABS_FLOOR)
    return SpectrumResult(eigenvalues=vals, requested=op.dim, matvec_count=op.dim,
                          residuals=res, asymmetry=asym, eigenvectors=vecs)


@dataclass
class ScalingReport:
    rows: list  # dicts with n_t, dim, matvec_count, converged, leading

    @property
    def counts(self):
        return [r["matvec_count"] for r in self.rows]

    @property
    def spread(self):
        """``max/min - 1`` of the matvec counts."""
        c = self.counts
        return max(c) / min(c) - 1.0

    def __str__(self):
        lines = [f"{'n_t':>8s} {'dim':>8s} {'matvecs':>8s} {'conv':>5s} {'mu_1':>14s}"]
        for r in self.rows:
            lines.append(f"{r['n_t']:8d} {r['dim']:8d} {r['matvec_count']:8d} "
                         f"{str(r['converged']):>5s} {r['leading']:14.8g}")
        return "\n".join(lines)


def matvec_scaling_report(op_factory, grids, M: int, tol: float = 1e-8, seed: int = 0) -> ScalingReport:
    """Run :func:`leading_eigenvalues` on ``op_factory(grid)`` for each grid."""
    rows = []
    for grid in grids:
        op = op_factory(grid)
        res = leading_eigenvalues(op, M, tol=tol, seed=seed)
        rows.append({"n_t": grid.n_t, "dim": op.dim, "matvec_count": res.matvec_count,
                     "converged": res.converged, "leading": float(res.eigenvalues[0])})
    return ScalingReport(rows)


def write_spectrum_csv(result: SpectrumResult, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "eigenvalue", "residual"])
        for i, (mu, r) in enumerate(zip(result.eigenvalues, result.residuals)):
            w.writerow([i, f"{mu:.17g}", f"{r:.17g}"])
