"""Command-line front end.

    rare-sorm instanton --config run.json --out results/
    rare-sorm prefactor --config run.json --out results/ --emit-spectrum
    rare-sorm estimate  --config run.json --out results/
    rare-sorm sample    --config run.json --out results/ --workers 4
    rare-sorm compare   --config run.json --out results/

Exit codes: 0 success, 1 configuration error, 2 solver failure,
3 validity failure (nondegeneracy or singular Riccati), 4 sampling failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np

from .core import DivergenceError, ModelError
from .instanton import InstantonError, OptimizerConfig, _solution, find_instanton, find_instanton_mgf
from .models import REGISTRY, build_model
from .montecarlo import McConfig, SamplingError, compare_sweep, estimate_tails, write_mc_csv
from .prefactor import (NondegeneracyError, PrefactorBreakdown, compute_mgf_prefactor,
                        compute_prefactor, log_tail_probability, write_breakdown_csv,
                        write_breakdown_json)
from .riccati import RiccatiSingularityError, riccati_prefactor
from .spectrum import OperatorAsymmetryError, write_spectrum_csv

log = logging.getLogger("rare_sorm")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VALIDITY, EXIT_SAMPLING = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


def _g(x):
    return f"{float(x):.17g}"


def _json_floats(obj):
    """Round-trippable JSON: floats written with 17 significant digits."""
    if isinstance(obj, dict):
        return {k: _json_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_floats(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(_g(obj))
    return obj


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(_json_floats(obj), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    raw: dict
    model: str
    params: dict
    nt: int
    mode: str

    def get(self, key, default=None):
        return self.raw.get(key, default)

    def require(self, key):
        if key not in self.raw:
            raise ConfigError(f"missing required field {key!r}")
        return self.raw[key]

    def number(self, key, default=None, kind=float):
        if key not in self.raw:
            if default is None:
                raise ConfigError(f"missing required field {key!r}")
            return default
        try:
            return kind(self.raw[key])
        except (TypeError, ValueError):
            raise ConfigError(f"field {key!r} must be a number, got {self.raw[key]!r}") from None

    def numbers(self, key):
        val = self.require(key)
        vals = val if isinstance(val, list) else [val]
        try:
            return [float(v) for v in vals]
        except (TypeError, ValueError):
            raise ConfigError(f"field {key!r} must be a number or a list of numbers") from None

    def optimizer(self):
        opt = self.raw.get("optimizer", {})
        if not isinstance(opt, dict):
            raise ConfigError("field 'optimizer' must be an object")
        allowed = {"mu_schedule", "lbfgs_memory", "lbfgs_max_iter", "grad_tol", "constraint_tol"}
        unknown = set(opt) - allowed
        if unknown:
            raise ConfigError(f"unknown optimizer field(s) {sorted(unknown)}; allowed {sorted(allowed)}")
        try:
            return OptimizerConfig(**opt)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"field 'optimizer': {exc}") from None


def load_config(path, overrides) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if "model" not in raw:
        raise ConfigError("missing required field 'model'")
    if raw["model"] not in REGISTRY:
        raise ConfigError(f"field 'model': unknown model {raw['model']!r}; choose from {sorted(REGISTRY)}")
    params = raw.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("field 'params' must be an object")
    mode = raw.get("mode", "tail")
    if mode not in ("tail", "mgf"):
        raise ConfigError(f"field 'mode' must be 'tail' or 'mgf', got {mode!r}")
    if raw.get("route", "operator") not in ("operator", "riccati"):
        raise ConfigError(f"field 'route' must be 'operator' or 'riccati', got {raw['route']!r}")
    cfg = RunConfig(raw, raw["model"], params, 0, mode)
    cfg.nt = cfg.number("nt", kind=int)
    if cfg.nt < 2:
        raise ConfigError("field 'nt' must be >= 2")
    return cfg


def _model(cfg):
    try:
        return build_model(cfg.model, **cfg.params)
    except TypeError as exc:
        raise ConfigError(f"field 'params': {exc}") from None


# ---------------------------------------------------------------------------
# instanton files


def _write_paths(sol, path):
    n = sol.eta_z.dim
    eta = sol.eta_z.as_steps()
    phi = sol.phi_z.as_steps()
    theta = sol.theta_z.as_steps()
    times = sol.eta_z.grid.times
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"eta_{i}" for i in range(n)] + [f"phi_{i}" for i in range(n)]
                   + [f"theta_{i}" for i in range(n)])
        for k in range(len(times)):
            e = eta[k] if k < len(eta) else np.full(n, np.nan)
            w.writerow([_g(times[k])] + [_g(x) for x in e] + [_g(x) for x in phi[k]]
                       + [_g(x) for x in theta[k]])


def _summary(cfg, sol):
    out = {"model": cfg.model, "params": cfg.params, "nt": cfg.nt, "mode": cfg.mode,
           "z": sol.target_z, "lambda_z": sol.lambda_z, "rate": sol.rate,
           "achieved_z": sol.achieved_z, "iterations": sol.iterations,
           "converged": sol.converged, "optimality_residual": sol.optimality_residual}
    if cfg.mode == "mgf":
        # I*(lam) = lam F[eta_lam] - 1/2 |eta_lam|^2
        out["mgf_exponent"] = sol.lambda_z * sol.achieved_z - sol.rate
    return out


def load_instanton(directory, system, obs, grid):
    """Rebuild a saved solution; ``phi`` and ``theta`` are recomputed from ``eta``."""
    try:
        with open(os.path.join(directory, "instanton_summary.json")) as fh:
            summ = json.load(fh)
        with open(os.path.join(directory, "instanton_paths.csv")) as fh:
            rows = list(csv.reader(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"field 'instanton_dir': cannot load saved instanton: {exc}") from None
    n = system.dim
    eta = np.array([[float(x) for x in r[1:1 + n]] for r in rows[1:-1]])
    if eta.shape != (grid.n_t, n):
        raise ConfigError(f"saved instanton has {eta.shape[0]} steps, the config asks for {grid.n_t}")
    sol = _solution(system, obs, grid, eta.reshape(-1), float(summ["lambda_z"]), float(summ["z"]),
                    int(summ["iterations"]), bool(summ["converged"]), 0)
    return sol


def _get_instanton(cfg, system, obs, grid, out):
    src = cfg.get("instanton_dir")
    if src:
        return load_instanton(src, system, obs, grid)
    return _run_instanton(cfg, system, obs, grid, out)


def _run_instanton(cfg, system, obs, grid, out=None):
    opt = cfg.optimizer()
    if cfg.mode == "mgf":
        sol = find_instanton_mgf(system, obs, grid, cfg.number("lambda"), opt)
    else:
        sol = find_instanton(system, obs, grid, cfg.number("z"), opt)
    if out:
        _write_paths(sol, os.path.join(out, "instanton_paths.csv"))
        _dump(_summary(cfg, sol), os.path.join(out, "instanton_summary.json"))
    return sol


# ---------------------------------------------------------------------------
# commands


def cmd_instanton(cfg, args):
    system, obs = _model(cfg)
    sol = _run_instanton(cfg, system, obs, system.grid(cfg.nt), args.out)
    print(json.dumps(_json_floats(_summary(cfg, sol))))


def _breakdown(cfg, args, system, obs, grid, sol):
    M = cfg.number("M", 200, int)
    tol = cfg.number("tol", 1e-8)
    return compute_prefactor(system, obs, grid, sol, M=M, tol=tol, seed=args.seed or 0,
                             dense=args.dense, strict=True)


def cmd_prefactor(cfg, args):
    system, obs = _model(cfg)
    grid = system.grid(cfg.nt)
    sol = _get_instanton(cfg, system, obs, grid, args.out)
    if cfg.mode == "mgf":
        d = compute_mgf_prefactor(system, obs, grid, sol, M=cfg.number("M", 50, int),
                                  tol=cfg.number("tol", 1e-8), seed=args.seed or 0,
                                  dense=args.dense, details=True)
        res = {"lambda": sol.lambda_z, "R": d.R, "log_R": d.log_R, "det2": d.det2,
               "trace_reg": d.trace_reg, "strato_correction": d.strato_correction,
               "achieved_z": sol.achieved_z, "rate": sol.rate}
        _dump(res, os.path.join(args.out, "mgf_prefactor.json"))
        if args.emit_spectrum:
            _spectrum_csv(d.eigenvalues, os.path.join(args.out, "spectrum.csv"))
        print(json.dumps(_json_floats(res)))
        return
    if cfg.get("route", "operator") == "riccati":
        C = riccati_prefactor(system, obs, grid, sol)
        res = {"z": sol.target_z, "lambda_z": sol.lambda_z, "I_z": sol.rate, "C_z": C}
        _dump(res, os.path.join(args.out, "riccati_prefactor.json"))
        print(json.dumps(_json_floats(res)))
        return
    bd = _breakdown(cfg, args, system, obs, grid, sol)
    write_breakdown_json(bd, os.path.join(args.out, "breakdown.json"))
    write_breakdown_csv([bd], os.path.join(args.out, "breakdown.csv"), extra=[{"z": sol.target_z}])
    if args.emit_spectrum:
        _spectrum_csv(bd.eigenvalues_projected, os.path.join(args.out, "spectrum.csv"))
    print(json.dumps(_json_floats(bd.row())))
    if not bd.valid:
        raise NondegeneracyError("breakdown flagged invalid (projected eigenvalue near 1 or "
                                 "unconverged spectrum)", float(np.max(bd.eigenvalues_projected)),
                                 "flagged")


def _spectrum_csv(eigs, path):
    from .spectrum import SpectrumResult
    eigs = np.asarray(eigs)
    write_spectrum_csv(SpectrumResult(eigs, len(eigs), 0, np.zeros_like(eigs)), path)


def _load_breakdown(cfg, args):
    path = cfg.get("breakdown")
    if path:
        with open(path) as fh:
            return PrefactorBreakdown.from_dict(json.load(fh))
    system, obs = _model(cfg)
    grid = system.grid(cfg.nt)
    sol = _get_instanton(cfg, system, obs, grid, None)
    return _breakdown(cfg, args, system, obs, grid, sol)


def cmd_estimate(cfg, args):
    bd = _load_breakdown(cfg, args)
    eps = cfg.numbers("epsilons")
    path = os.path.join(args.out, "estimate.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epsilon", "I_z", "C_z", "log_probability", "probability"])
        for e in eps:
            lp = log_tail_probability(e, bd.I_z, bd)
            w.writerow([_g(e), _g(bd.I_z), _g(bd.C), _g(lp), _g(np.exp(lp))])
            print(f"epsilon={e:g}  log P={lp:.10g}  P={np.exp(lp):.6g}")


def _mc_config(cfg, args):
    return McConfig(n_samples=cfg.number("n_samples", kind=int), seed=args.seed or 0,
                    workers=args.workers or 1, chunk_size=cfg.number("chunk_size", 10_000, int),
                    abort_on_divergence=args.abort_on_divergence)


def cmd_sample(cfg, args):
    system, obs = _model(cfg)
    grid = system.grid(cfg.nt)
    mc = _mc_config(cfg, args)
    rows = []
    for e in cfg.numbers("epsilons"):
        rows.extend(estimate_tails(system, obs, grid, e, cfg.numbers("z_values"), mc.n_samples,
                                   mc.seed, mc.workers, mc.chunk_size,
                                   mc.abort_on_divergence))
    write_mc_csv(rows, os.path.join(args.out, "mc.csv"))
    for r in rows:
        print(f"epsilon={r.epsilon:g} z={r.z:g} p_hat={r.p_hat:.6g} "
              f"95%=[{r.wilson_95[0]:.4g}, {r.wilson_95[1]:.4g}] diverged={r.n_diverged}")


def cmd_compare(cfg, args):
    system, obs = _model(cfg)
    grid = system.grid(cfg.nt)
    opt = cfg.optimizer()
    M, tol = cfg.number("M", 200, int), cfg.number("tol", 1e-8)

    def source(z):
        sol = find_instanton(system, obs, grid, z, opt)
        return sol, compute_prefactor(system, obs, grid, sol, M=M, tol=tol, seed=args.seed or 0,
                                      dense=args.dense)

    table = compare_sweep(system, obs, grid, cfg.numbers("epsilons"), cfg.numbers("z_values"),
                          source, _mc_config(cfg, args))
    write_mc_csv(table.rows, os.path.join(args.out, "compare.csv"), with_fit=True)
    for key, exc in table.errors.items():
        print(f"cell {key} failed: {exc}", file=sys.stderr)
    if not table.rows:
        raise SamplingError("no comparison cell succeeded")


COMMANDS = {"instanton": cmd_instanton, "prefactor": cmd_prefactor, "estimate": cmd_estimate,
            "sample": cmd_sample, "compare": cmd_compare}


def build_parser():
    p = argparse.ArgumentParser(prog="rare-sorm", description=__doc__.split("\n\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", default=".", help="output directory (created if needed)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None, help="Monte Carlo worker processes")
    p.add_argument("--emit-spectrum", action="store_true", help="write spectrum.csv")
    p.add_argument("--dense", action="store_true", help="use the dense eigen-decomposition")
    p.add_argument("--nt", type=int, default=None, help="override the number of time steps")
    p.add_argument("--M", type=int, default=None, help="override the number of eigenvalues")
    p.add_argument("--abort-on-divergence", action="store_true",
                   help="fail instead of excluding diverged Monte Carlo samples")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"nt": args.nt, "M": args.M})
        os.makedirs(args.out, exist_ok=True)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, ModelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InstantonError, DivergenceError, OperatorAsymmetryError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (NondegeneracyError, RiccatiSingularityError) as exc:
        detail = f" (eigenvalue {exc.eigenvalue!r})" if hasattr(exc, "eigenvalue") else ""
        print(f"validity error: {exc}{detail}", file=sys.stderr)
        return EXIT_VALIDITY
    except SamplingError as exc:
        print(f"sampling error: {exc}", file=sys.stderr)
        return EXIT_SAMPLING
    return EXIT_OK


def _entry():
    sys.exit(main())


if __name__ == "__main__":
    _entry()
