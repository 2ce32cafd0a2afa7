"""Command-line experiment runner.

    circbeta <command> [--config FILE] [--set key.path=value ...] [--seed N]
                       [--out-dir DIR] [--workers N]

Every run writes its outputs plus ``manifest.txt`` into the output directory.
Exit status is 0 on success, 1 for a configuration error and 2 when a numeric
check fails.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .dynamics import (CollisionError, DbmConfig, StepUnderflowError, dbm_evolve, default_t_grid,
                       estimate_drift_limit, exchangeability_test, stationarity_test)
from .ensemble import EnsembleParams, McmcConfig, mcmc_diagnostics, sample, verblunsky_power_sums
from .field import field_covariance_comparison, tightness_report, write_tightness
from .rng import default_workers, stream
from .statistics import moment_report, power_sums
from .stein import (apply_generator_numeric, apply_generator_pk, apply_generator_product,
                    apply_generator_product_numeric, cubic_increment_scaling, scaling_audit,
                    stein_data, verify_increment_limits, write_audit)
from .transport import w1_convergence_experiment, w1_trend_check, write_w1_table


class ConfigError(ValueError):
    pass


DBM_DEFAULTS = {"dt": None, "collision_policy": "reject-and-halve", "drift_cap": None,
                "max_halvings": 40, "min_dt": 1e-12}

DEFAULTS = {
    "sample": {"n": 50, "beta": 2.0, "m": 1000, "method": "exact",
               "mcmc": {"proposal_scale": None, "burn_in": None, "thinning": None,
                        "proposal": "gaussian", "chains": 1}},
    "dbm": {"n": 20, "beta": 2.0, "t": None, "m": 5000, "kmax": 3, "dbm": dict(DBM_DEFAULTS),
            "trajectory": {"t": 0.01, "checkpoints": 10}},
    "verify-generator": {"configs": 200, "n_min": 2, "n_max": 8, "betas": [0.5, 1.0, 2.0, 4.0],
                         "kmax": 6, "tolerance": 1e-9, "decomposition_tolerance": 1e-12},
    "moments": {"n": 100, "beta": 2.0, "m": 20000, "d": 4},
    "increments": {"n": 10, "beta": 2.0, "d": 2, "m": 200, "n_noise": 64, "t_scale": 0.05,
                   "tolerance": 0.05, "dbm": dict(DBM_DEFAULTS),
                   "cubic": {"m": 4000, "t_min": 0.01, "t_max": 0.1, "points": 5}},
    "stein-bound": {"beta": 2.0, "d_grid": [2, 3, 4, 5, 6, 7, 8], "n_grid": [50, 100, 200, 400],
                    "m": 20000, "d_fixed": 2},
    "w1": {"beta": 2.0, "d": 2, "n_grid": [25, 50, 100, 200], "m": 1000, "method": "exact"},
    "field": {"beta": 2.0, "s_prime": 0.6, "n_grid": [50, 100, 200, 400], "m": 2000,
              "covariance": {"n": 400, "K": 5, "m": 4000}},
}


# -- configuration -------------------------------------------------------------

def _scalar_ok(value, default) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(value, bool):
        return False
    if isinstance(default, int):
        return isinstance(value, int) or (isinstance(value, float) and value.is_integer())
    if isinstance(default, float) or default is None:
        return isinstance(value, (int, float))
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def _check_schema(value, default, path: str):
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path or '<root>'}: expected a mapping")
        for key, v in value.items():
            sub = f"{path}.{key}" if path else str(key)
            if key not in default:
                raise ConfigError(f"{sub}: unknown key")
            _check_schema(v, default[key], sub)
    elif value is not None and not _scalar_ok(value, default):
        kind = "number" if default is None else type(default).__name__
        raise ConfigError(f"{path}: expected {kind}, got {value!r}")


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key.path=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"{key}: unknown key")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"{key}: unknown key")
    node[parts[-1]] = yaml.safe_load(raw)


def resolve_config(command: str, path: str | None, overrides: list[str]) -> dict:
    cfg = copy.deepcopy(DEFAULTS[command])
    if path:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if isinstance(loaded, dict) and command in loaded and isinstance(loaded[command], dict):
            loaded = loaded[command]
        _check_schema(loaded, DEFAULTS[command], "")
        cfg = _merge(cfg, loaded)
    for item in overrides:
        apply_override(cfg, item)
    _check_schema(cfg, DEFAULTS[command], "")
    return cfg


def _params(cfg: dict, seed: int) -> EnsembleParams:
    try:
        return EnsembleParams(int(cfg["n"]), float(cfg["beta"]), seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _dbm(cfg: dict) -> DbmConfig:
    return DbmConfig(**cfg)


def _dump(path: Path, data) -> Path:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=float))
    return path


# -- commands --------------------------------------------------------------------

def cmd_sample(cfg, seed, out, workers):
    params = _params(cfg, seed)
    mc = McmcConfig(**cfg["mcmc"])
    batch = sample(params, int(cfg["m"]), cfg["method"], mc, workers)
    files = list(batch.save(out / "samples"))
    ok = True
    if batch.provenance.get("sampler") == "metropolis":
        diag = mcmc_diagnostics(batch)
        files.append(_dump(out / "diagnostics.json", diag))
    return files, ok


def cmd_dbm(cfg, seed, out, workers):
    params = _params(cfg, seed)
    dbm = _dbm(cfg["dbm"])
    t = cfg["t"] if cfg["t"] is not None else 0.1 / params.n
    stat = stationarity_test(params, t, int(cfg["m"]), dbm, int(cfg["kmax"]))
    exch = exchangeability_test(params, t, int(cfg["m"]), dbm)
    tr_cfg = cfg["trajectory"]
    start = sample(params, 1, "exact").angles[0]
    tt = float(tr_cfg["t"])
    marks = np.linspace(0, tt, int(tr_cfg["checkpoints"]) + 1)[1:-1]
    traj = dbm_evolve(start, params.beta, tt, dbm, stream(seed, 60), checkpoints=marks)
    files = list(traj.save(out / "trajectory", params))
    files.append(_dump(out / "stationarity.json", stat))
    files.append(_dump(out / "exchangeability.json", exch))
    return files, stat["stationary"] and exch["symmetric"]


def generator_suite(cfg: dict, seed: int) -> dict:
    """Closed forms against the operator, for the first- and second-order identities."""
    rng = stream(seed, 61)
    kmax = int(cfg["kmax"])
    worst = {"pk": 0.0, "product": 0.0, "decomposition": 0.0}
    betas = [float(b) for b in cfg["betas"]]
    for _ in range(int(cfg["configs"])):
        n = int(rng.integers(int(cfg["n_min"]), int(cfg["n_max"]) + 1))
        beta = betas[int(rng.integers(len(betas)))]
        x = np.sort(rng.uniform(0, 2 * np.pi, n))
        sd = stein_data(x, kmax, beta)
        p = power_sums(x, kmax)
        for k in range(-kmax, kmax + 1):
            a, b = apply_generator_pk(x, k, beta), apply_generator_numeric(x, k, beta)
            worst["pk"] = max(worst["pk"], abs(a - b) / (1 + abs(b)))
            if k >= 1:
                dec = -sd.Lambda[k - 1, k - 1] * p[k - 1] + sd.R[k - 1]
                worst["decomposition"] = max(worst["decomposition"], abs(dec - a))
            for l in range(-kmax, kmax + 1):
                a2 = apply_generator_product(x, k, l, beta)
                b2 = apply_generator_product_numeric(x, k, l, beta)
                worst["product"] = max(worst["product"], abs(a2 - b2) / (1 + abs(b2)))
    tol, dtol = float(cfg["tolerance"]), float(cfg["decomposition_tolerance"])
    return {"worst": worst, "tolerance": tol, "decomposition_tolerance": dtol,
            "passed": bool(worst["pk"] <= tol and worst["product"] <= tol and worst["decomposition"] <= dtol)}


def cmd_verify_generator(cfg, seed, out, workers):
    report = generator_suite(cfg, seed)
    return [_dump(out / "generator.json", report)], report["passed"]


def cmd_moments(cfg, seed, out, workers):
    params = _params(cfg, seed)
    d = int(cfg["d"])
    batch = verblunsky_power_sums(params, int(cfg["m"]), d, workers)
    report = moment_report(batch, d)
    (out / "moments.json").write_text(report.to_json())
    report.to_csv(out / "moments.csv")
    return [out / "moments.json", out / "moments.csv"], report.passed


def cmd_increments(cfg, seed, out, workers):
    params = _params(cfg, seed)
    dbm = _dbm(cfg["dbm"]) if cfg["dbm"]["dt"] is not None else None
    t_grid = default_t_grid(params.n, float(cfg["t_scale"]))
    d = int(cfg["d"])
    drift = [estimate_drift_limit(params, k, t_grid, int(cfg["m"]), int(cfg["n_noise"]), dbm,
                                  tolerance=float(cfg["tolerance"])) for k in range(1, d + 2)]
    second = verify_increment_limits(params, d, t_grid, int(cfg["m"]), int(cfg["n_noise"]), dbm,
                                     tolerance=float(cfg["tolerance"]))
    c = cfg["cubic"]
    grid = np.geomspace(float(c["t_min"]), float(c["t_max"]), int(c["points"])) / params.n**2
    cubic = cubic_increment_scaling(params, d, grid, int(c["m"]), _dbm(cfg["dbm"]))
    files = [_dump(out / "drift_limits.json", drift), _dump(out / "increment_limits.json", second),
             _dump(out / "cubic_scaling.json", cubic)]
    ok = (all(r["passed"] for r in drift) and second["passed"]
          and 1.35 <= cubic["slope_third"] <= 1.65 and 0.9 <= cubic["slope_second"] <= 1.1)
    return files, ok


def cmd_stein_bound(cfg, seed, out, workers):
    report = scaling_audit(float(cfg["beta"]), [int(d) for d in cfg["d_grid"]],
                           [int(n) for n in cfg["n_grid"]], int(cfg["m"]), seed,
                           d_fixed=int(cfg["d_fixed"]), workers=workers)
    s = report["slopes"]
    ok = (s["R_vs_d"] is not None and s["R_vs_d"] <= 3.3 and s["S_vs_d"] <= 3.8 and s["T_vs_d"] <= 3.8
          and -1.15 <= s["bound_vs_n"] <= -0.85)
    return write_audit(report, out), ok


def cmd_w1(cfg, seed, out, workers):
    report = w1_convergence_experiment(float(cfg["beta"]), int(cfg["d"]), [int(n) for n in cfg["n_grid"]],
                                       int(cfg["m"]), seed, cfg["method"], workers=workers)
    report["trend"] = w1_trend_check(report)
    return [write_w1_table(report, out / "w1.csv"), _dump(out / "w1.json", report)], report["trend"]["passed"]


def cmd_field(cfg, seed, out, workers):
    beta = float(cfg["beta"])
    tight = tightness_report(beta, float(cfg["s_prime"]), [int(n) for n in cfg["n_grid"]], int(cfg["m"]),
                             seed=seed, workers=workers)
    c = cfg["covariance"]
    cov = field_covariance_comparison(beta, int(c["n"]), int(c["K"]), int(c["m"]), seed, workers=workers)
    files = write_tightness(tight, out) + [_dump(out / "covariance.json", cov)]
    ok = tight["bounded"] and tight.get("closed_within_4se", True) and cov["passed"]
    return files, ok


COMMANDS = {
    "sample": cmd_sample, "dbm": cmd_dbm, "verify-generator": cmd_verify_generator,
    "moments": cmd_moments, "increments": cmd_increments, "stein-bound": cmd_stein_bound,
    "w1": cmd_w1, "field": cmd_field,
}


# -- entry point -------------------------------------------------------------------

def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, argv: list[str], command: str, cfg: dict, seed: int, duration: float,
                   files: list[Path], status: int) -> Path:
    lines = [f"command: {command}", f"argv: {' '.join(argv)}", f"seed: {seed}",
             f"version: {__version__}", f"duration_s: {duration:.3f}", f"exit_status: {status}",
             "config:"]
    lines += ["  " + ln for ln in yaml.safe_dump(cfg, sort_keys=True).splitlines()]
    lines.append("outputs:")
    for f in sorted(files):
        lines.append(f"  {f.name} sha256={_digest(f)}")
    path = out / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1, like configuration errors; 2 is kept for numeric failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML file with settings for the command")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting by dotted path, e.g. --set mcmc.chains=4")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default="out")
    common.add_argument("--workers", type=int, default=None,
                        help="worker processes (default: $CIRCBETA_WORKERS or 1)")
    parser = _Parser(prog="circbeta", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "sample": "draw circular beta-ensemble configurations",
        "dbm": "Dyson Brownian motion trajectory, stationarity and exchangeability",
        "verify-generator": "closed-form generator identities against the operator",
        "moments": "second and fourth power-sum moments against their bounds",
        "increments": "conditional increment limits and cubic scaling",
        "stein-bound": "Wasserstein bound estimate and its scaling in d and n",
        "w1": "empirical W1 between power sums and the Gaussian target",
        "field": "Sobolev tightness and limiting-field covariance",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.command, args.config, args.overrides)
        if args.seed < 0:
            raise ConfigError("seed must be nonnegative")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    workers = args.workers if args.workers is not None else default_workers()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        files, ok = COMMANDS[args.command](cfg, args.seed, out, workers)
    except (CollisionError, StepUnderflowError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    status = 0 if ok else 2
    write_manifest(out, argv, args.command, cfg, args.seed, time.perf_counter() - start, files, status)
    print(f"{args.command}: {'ok' if ok else 'check failed'} -> {out}")
    return status


if __name__ == "__main__":
    sys.exit(main())
