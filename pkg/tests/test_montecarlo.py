import csv
import dataclasses

import numpy as np
import pytest
from scipy.stats import norm

from rare_sorm.core import Observable
from rare_sorm.models import additive_ou, geometric_bm
from rare_sorm.montecarlo import (MC_COLUMNS, CompareRow, McConfig, SamplingError, compare_sweep,
                                  estimate_tail, estimate_tails, wilson_interval, write_mc_csv)


def bernoulli_shim(p):
    """Brownian motion with ``f = Phi(X_T)``, so ``F >= 1 - p`` has probability ``p``.

    Euler is exact for constant drift and diffusion, so two steps are as good as many.
    """
    system, _ = additive_ou(kappa=0.0)
    obs = Observable(value=lambda x: norm.cdf(np.asarray(x)[..., 0]),
                     gradient=lambda x: norm.pdf(np.asarray(x)), hessian=None, name="uniform")
    return system, obs, system.grid(2), 1.0 - p


def test_known_probability():
    system, obs, grid, z = bernoulli_shim(0.1)
    est = estimate_tail(system, obs, grid, 1.0, z, 100_000, seed=5)
    lo, hi = est.wilson_99
    assert lo <= 0.1 <= hi
    assert est.p_hat == est.n_success / est.n_samples
    assert est.n_diverged == 0 and est.n_effective == 100_000


def test_wilson_symmetric_at_half():
    lo, hi = wilson_interval(50, 100)
    assert 0.5 - lo == pytest.approx(hi - 0.5, rel=1e-12)
    assert wilson_interval(0, 100)[0] == 0.0
    assert wilson_interval(100, 100)[1] == 1.0
    a, b = wilson_interval(7, 1000, 0.95), wilson_interval(7, 1000, 0.99)
    assert b[0] < a[0] < a[1] < b[1]
    with pytest.raises(ValueError):
        wilson_interval(0, 0)


def test_wilson_coverage():
    system, obs, grid, z = bernoulli_shim(0.01)
    hits = 0
    reps = 500
    for seed in range(reps):
        est = estimate_tail(system, obs, grid, 1.0, z, 2000, seed=seed)
        lo, hi = est.wilson_95
        hits += lo <= 0.01 <= hi
    assert 0.93 <= hits / reps <= 0.97


def test_result_independent_of_worker_count():
    system, obs, grid, z = bernoulli_shim(0.2)
    one = estimate_tails(system, obs, grid, 1.0, [z, 0.5], 40_000, seed=9, workers=1, chunk_size=7_000)
    two = estimate_tails(system, obs, grid, 1.0, [z, 0.5], 40_000, seed=9, workers=2, chunk_size=7_000)
    assert [e.n_success for e in one] == [e.n_success for e in two]
    assert one == two
    again = estimate_tails(system, obs, grid, 1.0, [z, 0.5], 40_000, seed=9, chunk_size=7_000)
    assert again == one
    other = estimate_tails(system, obs, grid, 1.0, [z], 40_000, seed=10, chunk_size=7_000)
    assert other[0].n_success != one[0].n_success


def test_shared_samples_give_monotone_counts():
    system, obs, grid, _ = bernoulli_shim(0.1)
    ests = estimate_tails(system, obs, grid, 1.0, [0.5, 0.8, 0.95], 20_000, seed=1)
    counts = [e.n_success for e in ests]
    assert counts[0] >= counts[1] >= counts[2]


def test_deterministic_environment_forces_serial(monkeypatch):
    system, obs, grid, z = bernoulli_shim(0.2)
    monkeypatch.setenv("RARE_SORM_DETERMINISTIC", "1")
    a = estimate_tail(system, obs, grid, 1.0, z, 30_000, seed=2, workers=4)
    monkeypatch.delenv("RARE_SORM_DETERMINISTIC")
    b = estimate_tail(system, obs, grid, 1.0, z, 30_000, seed=2, workers=1)
    assert a == b


def _blowup():
    system, obs = geometric_bm()
    return dataclasses.replace(system, drift=lambda x: 1e200 * np.asarray(x) ** 3), obs


def test_all_diverged_raises():
    system, obs = _blowup()
    with pytest.raises(SamplingError):
        estimate_tail(system, obs, system.grid(20), 0.01, 0.1, 50)


def test_partial_divergence_is_excluded_or_aborts():
    system, obs = geometric_bm()
    # diverges only when the first increment is positive
    drift = lambda x: np.where(np.asarray(x) > 1.0, 1e300 * np.asarray(x) ** 3, -np.asarray(x))  # noqa: E731
    blow = dataclasses.replace(system, drift=drift)
    grid = system.grid(5)
    with np.errstate(over="ignore"):
        est = estimate_tail(blow, obs, grid, 0.1, 0.0, 200, seed=3)
        assert 0 < est.n_diverged < 200
        assert est.n_effective == 200 - est.n_diverged
        assert est.p_hat == est.n_success / est.n_effective
        with pytest.raises(SamplingError):
            estimate_tail(blow, obs, grid, 0.1, 0.0, 200, seed=3, abort_on_divergence=True)


def test_invalid_sample_count():
    system, obs, grid, z = bernoulli_shim(0.1)
    with pytest.raises(ValueError):
        estimate_tail(system, obs, grid, 1.0, z, 0)


def test_compare_single_cell():
    system, obs, grid, z = bernoulli_shim(0.1)
    table = compare_sweep(system, obs, grid, [1.0], [z], lambda zz: (0.5, 2.0),
                          McConfig(n_samples=5_000, seed=4))
    assert len(table.rows) == 1 and not table.errors
    row = table.rows[0]
    assert row.epsilon == 1.0 and row.z == z
    assert row.sorm_estimate == pytest.approx(2.0 * np.sqrt(1 / (2 * np.pi)) * np.exp(-0.5))
    # the fitted curve is pinned to Monte Carlo at the only threshold
    assert row.fit_estimate == pytest.approx(row.mc.p_hat, rel=1e-12)


def test_compare_records_failures():
    system, obs, grid, z = bernoulli_shim(0.1)

    def source(zz):
        if zz > 0.5:
            raise RuntimeError("no instanton")
        return 0.1, 1.0

    table = compare_sweep(system, obs, grid, [1.0], [0.3, z], source, McConfig(n_samples=1_000))
    assert ("sorm", z) in table.errors
    assert np.isnan(table.rows[1].sorm_estimate) and np.isfinite(table.rows[0].sorm_estimate)
    blow, bobs = _blowup()
    table = compare_sweep(blow, bobs, blow.grid(10), [0.01], [0.1], lambda zz: (0.1, 1.0),
                          McConfig(n_samples=10))
    assert ("mc", 0.01) in table.errors and not table.rows
    with pytest.raises(ValueError):
        compare_sweep(system, obs, grid, [], [z], source, McConfig())


def test_csv_columns(tmp_path):
    system, obs, grid, z = bernoulli_shim(0.1)
    est = estimate_tail(system, obs, grid, 1.0, z, 1_000)
    write_mc_csv([est], tmp_path / "mc.csv")
    rows = list(csv.reader(open(tmp_path / "mc.csv")))
    assert rows[0] == MC_COLUMNS
    assert float(rows[1][2]) == est.p_hat and rows[1][7] == "nan"
    write_mc_csv([CompareRow(est, 0.09, 0.08)], tmp_path / "cmp.csv", with_fit=True)
    rows = list(csv.reader(open(tmp_path / "cmp.csv")))
    assert rows[0][-1] == "fit_estimate" and float(rows[1][-1]) == 0.08
    assert float(rows[1][7]) == 0.09
