import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from rare_sorm.cli import (EXIT_CONFIG, EXIT_OK, EXIT_SAMPLING, EXIT_SOLVER, EXIT_VALIDITY,
                           load_instanton, main)
from rare_sorm.instanton import OptimizerConfig, find_instanton
from rare_sorm.models import build_model
from rare_sorm.prefactor import compute_prefactor


def _config(tmp_path, name="run.json", **fields):
    path = tmp_path / name
    path.write_text(json.dumps(fields))
    return str(path)


def _run(tmp_path, command, cfg, *extra, out="out"):
    return main([command, "--config", cfg, "--out", str(tmp_path / out), *extra])


PP = dict(model="predator_prey", nt=100, z=0.5, M=20,
          optimizer={"grad_tol": 1e-7, "constraint_tol": 1e-8})


def test_instanton_then_prefactor_round_trip(tmp_path, capsys):
    cfg = _config(tmp_path, **PP)
    assert _run(tmp_path, "instanton", cfg) == EXIT_OK
    summary = json.loads((tmp_path / "out" / "instanton_summary.json").read_text())
    assert summary["converged"] and summary["nt"] == 100
    rows = list(csv.reader(open(tmp_path / "out" / "instanton_paths.csv")))
    assert rows[0] == ["t", "eta_0", "eta_1", "phi_0", "phi_1", "theta_0", "theta_1"]
    assert len(rows) == 102 and rows[-1][1] == "nan"

    cfg2 = _config(tmp_path, "again.json", **PP, instanton_dir=str(tmp_path / "out"))
    assert _run(tmp_path, "prefactor", cfg2, out="pf") == EXIT_OK
    bd = json.loads((tmp_path / "pf" / "breakdown.json").read_text())

    system, obs = build_model("predator_prey")
    grid = system.grid(100)
    sol = find_instanton(system, obs, grid, 0.5, OptimizerConfig(grad_tol=1e-7, constraint_tol=1e-8))
    direct = compute_prefactor(system, obs, grid, sol, M=20)
    assert bd["C"] == direct.C
    assert bd["lambda_z"] == sol.lambda_z and bd["I_z"] == sol.rate
    loaded = load_instanton(str(tmp_path / "out"), system, obs, grid)
    np.testing.assert_array_equal(loaded.eta_z.data, sol.eta_z.data)
    np.testing.assert_array_equal(loaded.phi_z.data, sol.phi_z.data)

    table = list(csv.reader(open(tmp_path / "pf" / "breakdown.csv")))
    assert table[0][:3] == ["z", "lambda_z", "I_z"] and float(table[1][0]) == 0.5
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["C_z"] == direct.C


def test_emit_spectrum_row_count(tmp_path):
    cfg = _config(tmp_path, **{**PP, "M": 12})
    assert _run(tmp_path, "prefactor", cfg, "--emit-spectrum") == EXIT_OK
    rows = list(csv.reader(open(tmp_path / "out" / "spectrum.csv")))
    assert rows[0] == ["index", "eigenvalue", "residual"] and len(rows) == 13


def test_mgf_mode_gbm(tmp_path):
    cfg = _config(tmp_path, model="geometric_bm", nt=400, mode="mgf", **{"lambda": -1.0}, M=10,
                  optimizer={"grad_tol": 1e-9})
    assert _run(tmp_path, "instanton", cfg) == EXIT_OK
    summary = json.loads((tmp_path / "out" / "instanton_summary.json").read_text())
    assert summary["mgf_exponent"] == pytest.approx(-1 / 6, rel=5e-3)
    assert _run(tmp_path, "prefactor", cfg, "--emit-spectrum", out="pf") == EXIT_OK
    res = json.loads((tmp_path / "pf" / "mgf_prefactor.json").read_text())
    assert res["R"] == pytest.approx(np.exp(-1 / 3) / np.sqrt(3), rel=1e-2)


def test_riccati_route(tmp_path):
    cfg = _config(tmp_path, model="additive_ou", nt=400, z=1.0, route="riccati",
                  optimizer={"grad_tol": 1e-9})
    assert _run(tmp_path, "prefactor", cfg) == EXIT_OK
    res = json.loads((tmp_path / "out" / "riccati_prefactor.json").read_text())
    assert res["C_z"] == pytest.approx(np.sqrt((1 - np.exp(-2)) / 2), rel=5e-3)


def test_estimate_is_affine_in_inverse_epsilon(tmp_path):
    cfg = _config(tmp_path, **PP, epsilons=[0.1, 0.05, 0.02, 0.01])
    assert _run(tmp_path, "estimate", cfg) == EXIT_OK
    rows = list(csv.reader(open(tmp_path / "out" / "estimate.csv")))
    assert rows[0] == ["epsilon", "I_z", "C_z", "log_probability", "probability"]
    eps = np.array([float(r[0]) for r in rows[1:]])
    lp = np.array([float(r[3]) for r in rows[1:]]) - 0.5 * np.log(eps)
    coef = np.polyfit(1 / eps, lp, 1)
    assert coef[0] == pytest.approx(-float(rows[1][1]), rel=1e-10)
    assert np.exp(coef[1]) * np.sqrt(2 * np.pi) == pytest.approx(float(rows[1][2]), rel=1e-10)


def test_estimate_from_saved_breakdown(tmp_path):
    cfg = _config(tmp_path, **PP)
    assert _run(tmp_path, "prefactor", cfg) == EXIT_OK
    cfg2 = _config(tmp_path, "e.json", model="predator_prey", nt=100, epsilons=0.05,
                   breakdown=str(tmp_path / "out" / "breakdown.json"))
    assert _run(tmp_path, "estimate", cfg2, out="est") == EXIT_OK
    assert len(list(csv.reader(open(tmp_path / "est" / "estimate.csv")))) == 2


def test_sample_and_compare(tmp_path):
    cfg = _config(tmp_path, **PP, epsilons=[0.05], z_values=[0.2, 0.3], n_samples=2000)
    assert _run(tmp_path, "sample", cfg, "--seed", "3") == EXIT_OK
    rows = list(csv.reader(open(tmp_path / "out" / "mc.csv")))
    assert len(rows) == 3 and rows[0][0] == "epsilon"
    assert _run(tmp_path, "sample", cfg, "--seed", "3", "--workers", "2", out="again") == EXIT_OK
    assert (tmp_path / "again" / "mc.csv").read_text() == (tmp_path / "out" / "mc.csv").read_text()
    assert _run(tmp_path, "compare", cfg, "--seed", "3", out="cmp") == EXIT_OK
    rows = list(csv.reader(open(tmp_path / "cmp" / "compare.csv")))
    assert rows[0][-1] == "fit_estimate" and len(rows) == 3
    assert all(np.isfinite(float(r[7])) for r in rows[1:])


@pytest.mark.parametrize("fields, text", [
    ({"nt": 10}, "model"),
    ({"model": "nope", "nt": 10}, "unknown model"),
    ({"model": "geometric_bm"}, "nt"),
    ({"model": "geometric_bm", "nt": 10, "mode": "both"}, "mode"),
    ({"model": "geometric_bm", "nt": 10, "route": "fast"}, "route"),
    ({"model": "geometric_bm", "nt": 10, "z": 0.5, "optimizer": {"tolerance": 1}}, "optimizer"),
    ({"model": "geometric_bm", "nt": 10, "z": 0.5, "params": {"gamma": 1}}, "params"),
    ({"model": "geometric_bm", "nt": 10, "z": "high"}, "'z'"),
])
def test_config_errors(tmp_path, capsys, fields, text):
    assert _run(tmp_path, "instanton", _config(tmp_path, **fields)) == EXIT_CONFIG
    assert text in capsys.readouterr().err


def test_malformed_json_reports_position(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"model": "geometric_bm",\n "nt": }')
    assert _run(tmp_path, "instanton", str(path)) == EXIT_CONFIG
    assert "line 2" in capsys.readouterr().err
    assert _run(tmp_path, "instanton", str(tmp_path / "missing.json")) == EXIT_CONFIG


def test_missing_saved_instanton(tmp_path):
    cfg = _config(tmp_path, **PP, instanton_dir=str(tmp_path / "nowhere"))
    assert _run(tmp_path, "prefactor", cfg) == EXIT_CONFIG


def test_solver_failure_exit_code(tmp_path, capsys):
    # the generating function is infinite once lambda T >= 1
    cfg = _config(tmp_path, model="geometric_bm", nt=100, mode="mgf", **{"lambda": 1.2})
    with np.errstate(all="ignore"):
        assert _run(tmp_path, "instanton", cfg) == EXIT_SOLVER
    assert "solver error" in capsys.readouterr().err


def test_validity_failure_exit_code(tmp_path, capsys):
    # an unreachable eigen-tolerance leaves the spectrum unconverged; the
    # Krylov basis must be smaller than the space for that to happen
    cfg = _config(tmp_path, **{**PP, "nt": 60, "M": 10}, tol=1e-30)
    assert _run(tmp_path, "prefactor", cfg) == EXIT_VALIDITY
    assert "validity error" in capsys.readouterr().err
    assert json.loads((tmp_path / "out" / "breakdown.json").read_text())["valid"] is False


def test_sampling_failure_exit_code(tmp_path):
    cfg = _config(tmp_path, model="geometric_bm", nt=20, epsilons=[0.1], z_values=[0.1],
                  n_samples=10, params={"beta": 1e200})
    with np.errstate(all="ignore"):
        assert _run(tmp_path, "sample", cfg) == EXIT_SAMPLING


def test_module_entry_point(tmp_path):
    cfg = _config(tmp_path, model="additive_ou", nt=50, z=1.0)
    proc = subprocess.run([sys.executable, "-m", "rare_sorm", "instanton", "--config", cfg,
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["model"] == "additive_ou"
    proc = subprocess.run([sys.executable, "-m", "rare_sorm", "instanton", "--config",
                           str(tmp_path / "none.json")], capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG
