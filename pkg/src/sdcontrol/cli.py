"""Command-line experiment runner.

Usage::

    sdcontrol COMMAND CONFIG.ini [--seed N] [--threads K] [--out DIR]

The config is a flat INI file.  Every section is optional except that a seed
must come from ``[run] seed`` or ``--seed``.  Each command writes a CSV table
and a JSON report (which embeds the resolved config) into the output
directory.

Exit codes: 0 success, 2 bad config, 3 numerical failure, 4 gate failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import carleman as C
from . import hum
from .coeff import CoefficientError, DiffusionCoefficient, validate_degeneracy
from .noise import NoiseTree
from .solvers import (BackwardProblem, ForwardProblem, level_statistics, solve_backward,
                      solve_forward, write_statistics_csv)
from .spacegrid import SpatialGrid, assemble, default_grid
from .weights import BAR, STANDARD, build_weight_system, verify_theta_bounds

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_GATE = 0, 2, 3, 4

COMMANDS = ("check-coeff", "weights", "verify-theta", "simulate-forward", "solve-backward",
            "verify-carleman", "verify-prop39", "verify-observability",
            "verify-backward-carleman", "verify-caccioppoli", "hum-backward",
            "hum-two-controls", "uc-probe")


class ConfigError(ValueError):
    pass


class GateFailure(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    seed: int
    alpha: float | None = 0.5
    coefficient_csv: str | None = None
    T: float = 0.5
    omega: tuple[float, float] = (0.3, 0.8)
    omega1: tuple[float, float] = (0.47, 0.53)
    M: int = 80
    grading: str = "default"
    N: int = 10
    backend: str = C.TREE
    s0: float = 1.0
    decades: float = 2.0
    per_decade: int = 3
    ensemble: int = 20
    s_observability: float = 1e-5
    omega_small: tuple[float, float] | None = None
    inner: tuple[float, float] = (0.4, 0.7)
    mu0: float = 1e-7
    weight_sign: float = -1.0
    eps: tuple[float, ...] = (1e-1, 1e-2, 1e-3, 1e-4)
    s_hum: float = 1.5e-6
    hum_M: int = 40
    hum_N: int = 6
    cg_tol: float = 1e-8
    cg_max_iter: int = 500
    b: float = 0.0
    c: float = 0.0
    candidates: int = 200
    threshold: float = 1e-12

    def to_dict(self) -> dict:
        return asdict(self)


def _interval(text: str) -> tuple[float, float]:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 2:
        raise ConfigError(f"interval needs two numbers, got {text!r}")
    lo, hi = map(float, parts)
    if not 0.0 < lo < hi < 1.0:
        raise ConfigError(f"interval {text!r} must satisfy 0 < lo < hi < 1")
    return lo, hi


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.replace(",", " ").split())


# (section, key) -> (attribute, parser)
_SCHEMA = {
    ("run", "seed"): ("seed", int),
    ("coefficient", "alpha"): ("alpha", float),
    ("coefficient", "csv"): ("coefficient_csv", str),
    ("problem", "T"): ("T", float),
    ("problem", "omega"): ("omega", _interval),
    ("problem", "omega1"): ("omega1", _interval),
    ("problem", "b"): ("b", float),
    ("problem", "c"): ("c", float),
    ("grid", "M"): ("M", int),
    ("grid", "grading"): ("grading", str),
    ("tree", "N"): ("N", int),
    ("tree", "backend"): ("backend", str),
    ("carleman", "s0"): ("s0", float),
    ("carleman", "decades"): ("decades", float),
    ("carleman", "per_decade"): ("per_decade", int),
    ("carleman", "ensemble"): ("ensemble", int),
    ("observability", "s"): ("s_observability", float),
    ("observability", "omega_small"): ("omega_small", _interval),
    ("caccioppoli", "inner"): ("inner", _interval),
    ("caccioppoli", "mu0"): ("mu0", float),
    ("caccioppoli", "weight_sign"): ("weight_sign", float),
    ("hum", "eps"): ("eps", _floats),
    ("hum", "s"): ("s_hum", float),
    ("hum", "M"): ("hum_M", int),
    ("hum", "N"): ("hum_N", int),
    ("hum", "cg_tol"): ("cg_tol", float),
    ("hum", "cg_max_iter"): ("cg_max_iter", int),
    ("uc", "candidates"): ("candidates", int),
    ("uc", "threshold"): ("threshold", float),
}


def load_config(path: str | Path | None, seed: int | None = None) -> ExperimentConfig:
    """Parse and validate an INI config; ``seed`` overrides ``[run] seed``."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
    values: dict = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            if (section, key) not in _SCHEMA:
                raise ConfigError(f"unknown key [{section}] {key}")
            attr, conv = _SCHEMA[(section, key)]
            try:
                values[attr] = conv(raw)
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
    if seed is not None:
        values["seed"] = seed
    if "seed" not in values:
        raise ConfigError("a seed is required ([run] seed or --seed)")
    if "coefficient_csv" in values and "alpha" not in values:
        values["alpha"] = None
    cfg = ExperimentConfig(**values)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.T <= 0:
        raise ConfigError("T must be positive")
    if not (cfg.omega[0] < cfg.omega1[0] < cfg.omega1[1] < cfg.omega[1]):
        raise ConfigError("omega1 must lie strictly inside omega")
    if not (cfg.omega[0] <= cfg.inner[0] < cfg.inner[1] <= cfg.omega[1]):
        raise ConfigError("caccioppoli inner interval must lie inside omega")
    if min(cfg.M, cfg.hum_M) < 4 or min(cfg.N, cfg.hum_N) < 1 or cfg.ensemble < 1 or cfg.candidates < 1:
        raise ConfigError("M >= 4, N >= 1 and positive ensemble sizes are required")
    if cfg.backend not in (C.TREE, C.MOMENTS):
        raise ConfigError(f"backend must be {C.TREE!r} or {C.MOMENTS!r}")
    if cfg.grading != "default" and cfg.grading != "uniform" and not cfg.grading.startswith("power:"):
        raise ConfigError("grading must be 'default', 'uniform' or 'power:<p>'")
    if any(e <= 0 for e in cfg.eps) or not cfg.eps:
        raise ConfigError("eps schedule must be non-empty and positive")
    if cfg.weight_sign not in (-1.0, 1.0):
        raise ConfigError("weight_sign must be -1 or 1")
    if cfg.alpha is None and cfg.coefficient_csv is None:
        raise ConfigError("give [coefficient] alpha or csv")


# --------------------------------------------------------------------------
# builders

def _coefficient(cfg):
    if cfg.coefficient_csv is not None:
        return DiffusionCoefficient.from_csv(cfg.coefficient_csv)
    return DiffusionCoefficient.power_law(cfg.alpha)


def _operator(cfg, a, M=None):
    M = cfg.M if M is None else M
    if cfg.grading == "default":
        grid = default_grid(a, M)
    elif cfg.grading == "uniform":
        grid = SpatialGrid.uniform(M)
    else:
        grid = SpatialGrid.power(M, float(cfg.grading.split(":", 1)[1]))
    return assemble(a, grid)


def _weights(cfg, a, s=1.0, variant=STANDARD):
    return build_weight_system(a, cfg.T, cfg.omega, cfg.omega1, s, variant)


def _write_json(path, payload, cfg):
    payload = dict(payload)
    payload["config"] = cfg.to_dict()
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_jsonable)


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if hasattr(v, "value"):
        return v.value
    return str(v)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


# --------------------------------------------------------------------------
# commands

def cmd_check_coeff(cfg, out, threads):
    a = _coefficient(cfg)
    rep = validate_degeneracy(a)
    cls = rep.degeneracy_class.value if rep.degeneracy_class is not None else "invalid"
    print(f"{cls}, K={rep.K:g}")
    _write_rows(out / "check_coeff.csv", ["class", "K", "max_violation", "valid"],
                [[cls, float(rep.K), float(rep.max_violation), rep.valid]])
    _write_json(out / "check_coeff.json", rep.to_dict(), cfg)
    if not rep.valid:
        raise GateFailure(rep.message or "coefficient violates the structural hypotheses")


def cmd_weights(cfg, out, threads):
    a = _coefficient(cfg)
    ws = _weights(cfg, a)
    times = np.linspace(0.0, cfg.T, 11)[1:-1]
    xs = np.linspace(0.0, 1.0, 21)
    ws.export_csv(out / "weights.csv", times, xs)
    _write_json(out / "weights.json", {"d": ws.d, "rho_inf": ws.rho_inf}, cfg)
    print(f"weights written: d={ws.d:.6g}, rho_inf={ws.rho_inf:.6g}")


def cmd_verify_theta(cfg, out, threads):
    rep = verify_theta_bounds(cfg.T)
    rows = [[k, rep.max_ratio[k], rep.residual[k], rep.relative_residual[k]]
            for k in rep.residual]
    _write_rows(out / "verify_theta.csv", ["bound", "max_ratio", "residual", "relative_residual"],
                rows)
    _write_json(out / "verify_theta.json", rep.to_dict(), cfg)
    for k, v in rep.residual.items():
        print(f"{k}: residual {v:.6g}")
    if not rep.passed:
        raise GateFailure("theta bounds violated")


def _y0(op):
    return np.sin(np.pi * op.nodes) * op.free_mask


def cmd_simulate_forward(cfg, out, threads):
    a = _coefficient(cfg)
    op = _operator(cfg, a)
    tree = NoiseTree(cfg.N, cfg.T)
    y = solve_forward(ForwardProblem(op, tree, _y0(op), b=cfg.b, c=cfg.c))
    rows = level_statistics(op, y)
    _check_finite([r["mean_sq_norm"] for r in rows])
    write_statistics_csv(out / "simulate_forward.csv", rows)
    _write_json(out / "simulate_forward.json", {"levels": rows}, cfg)
    print(f"E||y(T)||^2 = {rows[-1]['mean_sq_norm']:.6g}")


def cmd_solve_backward(cfg, out, threads):
    a = _coefficient(cfg)
    op = _operator(cfg, a)
    tree = NoiseTree(cfg.N, cfg.T)
    z, _ = solve_backward(BackwardProblem(op, tree, _y0(op), b=cfg.b, c=cfg.c))
    rows = level_statistics(op, z)
    _check_finite([r["mean_sq_norm"] for r in rows])
    write_statistics_csv(out / "solve_backward.csv", rows)
    _write_json(out / "solve_backward.json", {"levels": rows}, cfg)
    print(f"||z(0)||^2 = {rows[0]['mean_sq_norm']:.6g}")


def _check_finite(values):
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("non-finite values in the solution")


def _s_grid(cfg, s0=None):
    return C.geometric_s_grid(cfg.s0 if s0 is None else s0, cfg.decades, cfg.per_decade)


def _report(rep, name, cfg, out):
    rep.to_csv(out / f"{name}.csv")
    rep.to_json(out / f"{name}.json", cfg.to_dict())
    print(f"{name}: max ratio {rep.max_ratio:.6g}, passed={rep.passed}")
    if not rep.finite:
        raise FloatingPointError(f"{name}: non-finite ratios")
    if not rep.passed:
        raise GateFailure(f"{name}: gate failed")


def cmd_verify_carleman(cfg, out, threads):
    a = _coefficient(cfg)
    op, ws = _operator(cfg, a), _weights(cfg, a)
    ens = C.make_ensemble(cfg.seed, cfg.ensemble)
    _report(C.verify_carleman_forward(ws, op, cfg.N, ens, _s_grid(cfg), cfg.backend, threads),
            "verify_carleman", cfg, out)


def cmd_verify_prop39(cfg, out, threads):
    a = _coefficient(cfg)
    op, ws = _operator(cfg, a), _weights(cfg, a)
    ens = C.make_ensemble(cfg.seed, cfg.ensemble, drift_source=True, noise_source=True)
    _report(C.verify_carleman_sources(ws, op, cfg.N, ens, _s_grid(cfg), cfg.backend, threads),
            "verify_prop39", cfg, out)


def cmd_verify_observability(cfg, out, threads):
    a = _coefficient(cfg)
    op, ws = _operator(cfg, a), _weights(cfg, a)
    ens = C.make_ensemble(cfg.seed, cfg.ensemble)
    rep = C.verify_observability(ws, op, cfg.N, ens, cfg.s_observability, backend=cfg.backend,
                                 threads=threads)
    if cfg.omega_small is not None:
        small = C.verify_observability(ws, op, cfg.N, ens, cfg.s_observability,
                                       omega=cfg.omega_small, backend=cfg.backend,
                                       threads=threads)
        small.to_csv(out / "verify_observability_small.csv")
        print(f"shrunken omega: max ratio {small.max_ratio:.6g}")
        if not small.max_ratio > rep.max_ratio:
            raise GateFailure("shrinking omega did not increase the ratio")
    _report(rep, "verify_observability", cfg, out)


def cmd_verify_backward_carleman(cfg, out, threads):
    a = _coefficient(cfg)
    op, ws = _operator(cfg, a), _weights(cfg, a, variant=BAR)
    ens = C.make_ensemble(cfg.seed, cfg.ensemble, reaction=False, drift_source=True,
                          backward=True)
    _report(C.verify_backward_carleman(ws, op, cfg.N, ens, _s_grid(cfg), cfg.backend, threads),
            "verify_backward_carleman", cfg, out)


def cmd_verify_caccioppoli(cfg, out, threads):
    a = _coefficient(cfg)
    op, ws = _operator(cfg, a), _weights(cfg, a)
    ens = C.make_ensemble(cfg.seed, cfg.ensemble, reaction=False, drift_source=True,
                          zero_initial=True)
    rep = C.verify_caccioppoli(ws, op, cfg.N, ens, cfg.inner, cfg.omega, _s_grid(cfg, cfg.mu0),
                               cfg.weight_sign, cfg.backend, threads)
    rep.to_csv(out / "verify_caccioppoli.csv")
    rep.to_json(out / "verify_caccioppoli.json", cfg.to_dict())
    print(f"verify_caccioppoli: max ratio {rep.max_ratio:.6g}, finite={rep.finite}")
    if not rep.finite:
        raise GateFailure("verify_caccioppoli: non-finite ratios")


def cmd_hum_backward(cfg, out, threads):
    a = _coefficient(cfg)
    op = _operator(cfg, a, cfg.hum_M)
    tree = NoiseTree(cfg.hum_N, cfg.T)
    rng = np.random.default_rng(cfg.seed)
    eta = C._sine_series(rng.standard_normal(6) / np.arange(1, 7), op.nodes) * op.free_mask
    prob = hum.BackwardControlProblem(op, tree, cfg.omega, eta, b=cfg.b, c=cfg.c)
    results = hum.null_control_sweep(prob, cfg.eps, cg_tol=cfg.cg_tol,
                                     cg_max_iter=cfg.cg_max_iter)
    _finish_sweep(results, "hum_backward", cfg, out)


def cmd_hum_two_controls(cfg, out, threads):
    a = _coefficient(cfg)
    op = _operator(cfg, a, cfg.hum_M)
    tree = NoiseTree(cfg.hum_N, cfg.T)
    ws = build_weight_system(a, cfg.T, cfg.omega, cfg.omega1, cfg.s_hum, BAR)
    prob = hum.ForwardControlProblem(op, tree, ws, _y0(op), b=cfg.b)
    results = hum.two_control_sweep(prob, cfg.eps, cg_tol=cfg.cg_tol,
                                    cg_max_iter=cfg.cg_max_iter)
    _finish_sweep(results, "hum_two_controls", cfg, out)


def _finish_sweep(results, name, cfg, out):
    hum.write_sweep(results, out / f"{name}.json", out / f"{name}.csv", cfg.to_dict())
    for r in results:
        print(f"eps={r.eps:g}: target {r.target_norm:.6g}, ratio {r.target_norm / r.eps:.6g}, "
              f"iterations {r.iterations}")
    if not all(r.converged for r in results):
        raise FloatingPointError(f"{name}: CG did not converge")
    if not all(math.isfinite(r.target_norm) for r in results):
        raise FloatingPointError(f"{name}: non-finite target norm")


def uc_candidates(seed: int, count: int, op) -> list[np.ndarray]:
    """Random smooth initial data; every third one is a bump supported off omega."""
    rng = np.random.default_rng(seed)
    x = op.nodes
    out = []
    for i in range(count):
        if i % 3 == 2:
            lo = rng.uniform(0.02, 0.15)
            wdt = rng.uniform(0.05, 0.12)
            bump = np.where((x > lo) & (x < lo + wdt),
                            np.sin(np.pi * (x - lo) / wdt) ** 2, 0.0)
            out.append(bump * op.free_mask)
        else:
            coef = rng.standard_normal(6) / np.arange(1, 7)
            out.append(C._sine_series(coef, x) * op.free_mask)
    return out


def cmd_uc_probe(cfg, out, threads):
    a = _coefficient(cfg)
    op = _operator(cfg, a)
    tree = NoiseTree(cfg.N, cfg.T)
    cands = uc_candidates(cfg.seed, cfg.candidates, op)
    rep = hum.unique_continuation_probe(op, tree, cands, cfg.omega, threshold=cfg.threshold,
                                        b=cfg.b, c=cfg.c)
    _write_rows(out / "uc_probe.csv", ["candidate", "local_energy", "global_energy", "flagged"],
                [[i, lo, gl, int(i in rep.flagged)]
                 for i, (lo, gl) in enumerate(zip(rep.local, rep.global_))])
    _write_json(out / "uc_probe.json", rep.to_dict(), cfg)
    print(f"uc-probe: {rep.violations} violations over {len(cands)} candidates")
    if rep.violations:
        raise GateFailure("unique continuation violated")


_HANDLERS = {name: globals()["cmd_" + name.replace("-", "_")] for name in COMMANDS}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdcontrol", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("config", nargs="?", default=None, help="INI config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default="out", help="output directory")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config, args.seed)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except (ConfigError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        _HANDLERS[args.command](cfg, out, args.threads)
    except (ConfigError, CoefficientError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GateFailure as exc:
        print(f"gate failure: {exc}", file=sys.stderr)
        return EXIT_GATE
    except (FloatingPointError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
