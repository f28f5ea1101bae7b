"""Brute-force Euler-Maruyama estimates of tail probabilities ``P(F >= z)``.

Samples are generated in fixed-size chunks; chunk ``c`` draws from the stream
``SeedSequence([seed, c])``.  Counts are integer sums over chunks, so results
depend only on ``(seed, n_samples, chunk_size)`` and not on the number of
workers.
"""

from __future__ import annotations

import csv
import logging
import multiprocessing as mp
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from .propagation import sample_batch

log = logging.getLogger(__name__)

DEFAULT_CHUNK = 10_000


class SamplingError(RuntimeError):
    """No usable samples were produced."""


def wilson_interval(k: int, n: int, level: float = 0.95):
    """Wilson score interval for ``k`` successes in ``n`` trials."""
    if n < 1:
        raise ValueError("need at least one trial")
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


@dataclass(frozen=True)
class TailEstimate:
    epsilon: float
    z: float
    p_hat: float
    wilson_95: tuple
    wilson_99: tuple
    n_success: int
    n_samples: int
    n_diverged: int

    @property
    def n_effective(self):
        return self.n_samples - self.n_diverged


@dataclass(frozen=True)
class McConfig:
    n_samples: int = 100_000
    seed: int = 0
    workers: int = 1
    chunk_size: int = DEFAULT_CHUNK
    abort_on_divergence: bool = False


def deterministic_mode() -> bool:
    return os.environ.get("RARE_SORM_DETERMINISTIC", "") not in ("", "0")


def _chunk_counts(system, obs, grid, epsilon, z, seed, chunk, size):
    rng = np.random.default_rng(np.random.SeedSequence([seed, chunk]))
    batch = sample_batch(system, obs, grid, epsilon, size, rng)
    ok = ~batch.diverged
    F = batch.F[ok]
    return (F[:, None] >= z[None, :]).sum(axis=0), int(batch.diverged.sum())


# forked workers read the job from here instead of unpicklable closures
_JOB = {}


def _worker(args):
    chunk, size = args
    j = _JOB
    return _chunk_counts(j["system"], j["obs"], j["grid"], j["eps"], j["z"], j["seed"], chunk, size)


def _run_chunks(system, obs, grid, epsilon, z, n_samples, seed, workers, chunk_size):
    sizes = [min(chunk_size, n_samples - s) for s in range(0, n_samples, chunk_size)]
    tasks = list(enumerate(sizes))
    if deterministic_mode():
        workers = 1
    if workers > 1 and len(tasks) > 1 and "fork" in mp.get_all_start_methods():
        _JOB.update(system=system, obs=obs, grid=grid, eps=epsilon, z=z, seed=seed)
        try:
            with mp.get_context("fork").Pool(workers) as pool:
                results = pool.map(_worker, tasks)
        finally:
            _JOB.clear()
    else:
        results = [_chunk_counts(system, obs, grid, epsilon, z, seed, c, s) for c, s in tasks]
    counts = np.zeros(z.size, dtype=np.int64)
    diverged = 0
    for c, d in results:
        counts += c
        diverged += d
    return counts, diverged


def estimate_tails(system, obs, grid, epsilon, z_values, n_samples, seed=0, workers=1,
                   chunk_size=DEFAULT_CHUNK, abort_on_divergence=False):
    """Estimates for several thresholds from one shared set of samples.

    Diverged samples are excluded from the denominator, or raise
    :class:`SamplingError` if ``abort_on_divergence``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    z = np.atleast_1d(np.asarray(z_values, dtype=float))
    counts, diverged = _run_chunks(system, obs, grid, epsilon, z, int(n_samples), seed,
                                   int(workers), int(chunk_size))
    n_eff = n_samples - diverged
    if n_eff <= 0:
        raise SamplingError(f"all {n_samples} samples diverged at epsilon={epsilon}")
    if diverged and abort_on_divergence:
        raise SamplingError(f"{diverged} of {n_samples} samples diverged at epsilon={epsilon}")
    if diverged:
        log.warning("%d of %d samples diverged and were excluded", diverged, n_samples)
    out = []
    for zi, k in zip(z, counts):
        out.append(TailEstimate(
            epsilon=float(epsilon), z=float(zi), p_hat=float(k / n_eff),
            wilson_95=wilson_interval(k, n_eff, 0.95), wilson_99=wilson_interval(k, n_eff, 0.99),
            n_success=int(k), n_samples=int(n_samples), n_diverged=int(diverged)))
    return out


def estimate_tail(system, obs, grid, epsilon, z, n_samples, seed=0, workers=1,
                  chunk_size=DEFAULT_CHUNK, abort_on_divergence=False) -> TailEstimate:
    """``P(F[X^eps] >= z)`` with Wilson intervals."""
    return estimate_tails(system, obs, grid, epsilon, [z], n_samples, seed, workers, chunk_size,
                          abort_on_divergence)[0]


# ---------------------------------------------------------------------------
# comparison with the asymptotic estimate


@dataclass
class CompareRow:
    mc: TailEstimate | None
    sorm_estimate: float
    fit_estimate: float = float("nan")
    rate: float = float("nan")

    @property
    def epsilon(self):
        return self.mc.epsilon

    @property
    def z(self):
        return self.mc.z


@dataclass
class CompareTable:
    rows: list
    errors: dict = field(default_factory=dict)


def compare_sweep(system, obs, grid, epsilons, z_values, breakdown_source, mc_config: McConfig):
    """Monte Carlo versus the asymptotic estimate on an ``(epsilon, z)`` grid.

    ``breakdown_source(z)`` returns ``(rate, breakdown_or_C)``.  Each row also
    carries the prefactor-free curve ``const * exp(-I/eps)`` with ``const``
    chosen so that it matches Monte Carlo at the largest ``z`` with a success.
    """
    from .prefactor import tail_probability

    epsilons, z_values = list(epsilons), list(z_values)
    if not epsilons or not z_values:
        raise ValueError("epsilons and z_values must be non-empty")
    errors = {}
    sorm = {}
    for z in z_values:
        try:
            sorm[z] = breakdown_source(z)
        except Exception as exc:  # recorded per cell, the sweep goes on
            errors[("sorm", z)] = exc
    rows = []
    for eps in epsilons:
        try:
            ests = estimate_tails(system, obs, grid, eps, z_values, mc_config.n_samples,
                                  mc_config.seed, mc_config.workers, mc_config.chunk_size,
                                  mc_config.abort_on_divergence)
        except SamplingError as exc:
            errors[("mc", eps)] = exc
            continue
        cells = []
        for z, est in zip(z_values, ests):
            if z in sorm:
                rate, bd = sorm[z]
                cells.append(CompareRow(est, tail_probability(eps, rate, bd),
                                        rate=float(getattr(rate, "rate", rate))))
            else:
                cells.append(CompareRow(est, float("nan")))
        hit = [c for c in cells if c.mc.n_success > 0 and np.isfinite(c.rate)]
        if hit:
            ref = max(hit, key=lambda c: c.z)
            log_const = np.log(ref.mc.p_hat) + ref.rate / eps
            for c in cells:
                if np.isfinite(c.rate):
                    c.fit_estimate = float(np.exp(log_const - c.rate / eps))
        rows.extend(cells)
    return CompareTable(rows, errors)


MC_COLUMNS = ["epsilon", "z", "p_hat", "wilson95_lo", "wilson95_hi", "wilson99_lo",
              "wilson99_hi", "sorm_estimate", "n_samples", "n_diverged"]


def mc_row(est: TailEstimate, sorm_estimate=float("nan")):
    return [f"{est.epsilon:.17g}", f"{est.z:.17g}", f"{est.p_hat:.17g}",
            f"{est.wilson_95[0]:.17g}", f"{est.wilson_95[1]:.17g}",
            f"{est.wilson_99[0]:.17g}", f"{est.wilson_99[1]:.17g}",
            f"{sorm_estimate:.17g}", str(est.n_samples), str(est.n_diverged)]


def write_mc_csv(rows, path, with_fit=False):
    """``rows``: TailEstimates or CompareRows.  ``with_fit`` appends ``fit_estimate``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MC_COLUMNS + (["fit_estimate"] if with_fit else []))
        for r in rows:
            if isinstance(r, CompareRow):
                line = mc_row(r.mc, r.sorm_estimate)
                if with_fit:
                    line.append(f"{r.fit_estimate:.17g}")
            else:
                line = mc_row(r)
            w.writerow(line)
