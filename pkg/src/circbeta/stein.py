"""Generator algebra on power sums and the Stein bound for ``T_d``.

With ``W = (p_1, ..., p_d)`` the generator acts as ``L W = -Lambda W + R``,
and the conditional second moments of the increments of the stationary
diffusion tend to ``2 Lambda Sigma + S`` and ``T``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import (DbmConfig, conditional_increments, default_t_grid, drift, evolve_batch,
                       increment_config, relative_l1)
from .ensemble import EnsembleParams, verblunsky_power_sums, verblunsky_sample
from .rng import stream
from .statistics import mean_and_se, power_sums, signed_power_sums


# -- closed forms ----------------------------------------------------------------

def generator_pk_from_table(p: np.ndarray, n: int, k: int, beta: float) -> np.ndarray:
    """``L_beta p_k`` from a table ``p[..., l-1] = p_l`` holding at least ``|k|`` entries."""
    if k == 0:
        return np.zeros(p.shape[:-1], dtype=complex)
    K = abs(k)
    pk = p[..., K - 1]
    conv = np.zeros(p.shape[:-1], dtype=complex)
    for l in range(1, K):
        conv = conv + p[..., l - 1] * p[..., K - l - 1]
    out = -n * (beta / 2) * K * pk - (1 - beta / 2) * K**2 * pk - (beta / 2) * K * conv
    return np.conj(out) if k < 0 else out


def apply_generator_pk(x, k: int, beta: float):
    """Closed form of ``L_beta p_k`` at one configuration or a stack of them."""
    x = np.asarray(x, dtype=float)
    out = generator_pk_from_table(power_sums(x, max(abs(k), 1)), x.shape[-1], k, beta)
    return complex(out) if out.ndim == 0 else out


def apply_generator_product(x, k: int, l: int, beta: float):
    """``L(p_k p_l) = p_k L p_l + p_l L p_k - 2 k l p_{k+l}``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    p = power_sums(x, max(abs(k), abs(l), abs(k + l), 1))
    pk, pl = signed_power_sums(p, n, k), signed_power_sums(p, n, l)
    out = (pk * generator_pk_from_table(p, n, l, beta) + pl * generator_pk_from_table(p, n, k, beta)
           - 2 * k * l * signed_power_sums(p, n, k + l))
    return complex(out) if np.ndim(out) == 0 else out


# -- direct evaluation of the generator ------------------------------------------

def apply_generator(x, beta: float, grad, lap):
    """``sum_j drift_j grad_j + sum_j lap_j`` for given partial derivatives."""
    x = np.asarray(x, dtype=float)
    return np.sum(drift(x, beta) * grad, axis=-1) + np.sum(lap, axis=-1)


def apply_generator_numeric(x, k: int, beta: float):
    """``L_beta p_k`` straight from the differential operator and cot sums."""
    x = np.asarray(x, dtype=float)
    e = np.exp(1j * k * x)
    out = apply_generator(x, beta, 1j * k * e, -(k**2) * e)
    return complex(out) if np.ndim(out) == 0 else out


def apply_generator_product_numeric(x, k: int, l: int, beta: float):
    """``L_beta (p_k p_l)`` from the operator with the product rule written out."""
    x = np.asarray(x, dtype=float)
    ek, el = np.exp(1j * k * x), np.exp(1j * l * x)
    pk, pl = ek.sum(axis=-1)[..., None], el.sum(axis=-1)[..., None]
    grad = 1j * k * ek * pl + 1j * l * el * pk
    lap = -(k**2) * ek * pl - (l**2) * el * pk - 2 * k * l * ek * el
    out = apply_generator(x, beta, grad, lap)
    return complex(out) if np.ndim(out) == 0 else out


# -- Stein matrices ----------------------------------------------------------------

@dataclass
class SteinData:
    d: int
    beta: float
    n: int
    Lambda: np.ndarray
    Sigma: np.ndarray
    R: np.ndarray
    S: np.ndarray
    T: np.ndarray


def lambda_sigma(d: int, n: int, beta: float) -> tuple[np.ndarray, np.ndarray]:
    k = np.arange(1, d + 1)
    return np.diag(n * k * beta / 2), np.diag(2 * k / beta)


def stein_terms(p: np.ndarray, n: int, d: int, beta: float):
    """``R``, ``S`` and ``T`` from a table of ``p_1..p_{2d}`` (leading axes broadcast)."""
    if p.shape[-1] < 2 * d:
        raise ValueError("need power sums up to 2d")
    k = np.arange(1, d + 1)
    R = np.empty(p.shape[:-1] + (d,), dtype=complex)
    for kk in range(1, d + 1):
        conv = np.zeros(p.shape[:-1], dtype=complex)
        for l in range(1, kk):
            conv = conv + p[..., l - 1] * p[..., kk - l - 1]
        # sign of the k^2 term chosen so that -Lambda W + R = L W holds
        R[..., kk - 1] = kk**2 * (beta / 2 - 1) * p[..., kk - 1] - kk * (beta / 2) * conv
    jk = np.outer(k, k)
    S = 2 * jk * signed_power_sums(p, n, k[:, None] - k[None, :])
    S[..., np.arange(d), np.arange(d)] = 0.0
    T = -2 * jk * signed_power_sums(p, n, k[:, None] + k[None, :])
    return R, S, T


def stein_data(x, d: int, beta: float, n: int | None = None) -> SteinData:
    if d < 1:
        raise ValueError("d must be >= 1")
    x = np.asarray(x, dtype=float)
    n = x.shape[-1] if n is None else n
    lam, sig = lambda_sigma(d, n, beta)
    R, S, T = stein_terms(power_sums(x, 2 * d), n, d, beta)
    return SteinData(d, beta, n, lam, sig, R, S, T)


def increment_targets(p: np.ndarray, n: int, d: int, beta: float):
    """Limits of the first, mixed and plain increment rates at configurations with power sums ``p``."""
    lam, sig = lambda_sigma(d, n, beta)
    R, S, T = stein_terms(p, n, d, beta)
    first = -np.diag(lam) * p[..., :d] + R
    mixed = 2 * lam @ sig + S
    return first, mixed, T


# -- Monte Carlo verification ------------------------------------------------------

def verify_increment_limits(params: EnsembleParams, d: int, t_grid=None, m: int = 200, n_noise: int = 64,
                            cfg: DbmConfig | None = None, starts=None, control_variate: bool = True,
                            tolerance: float = 0.05) -> dict:
    """Extrapolated conditional increment moments against ``-Lambda W + R``, ``2 Lambda Sigma + S`` and ``T``.

    Each entry is compared by its relative L1 error over the starts.
    """
    x0 = verblunsky_sample(params, m).angles if starts is None else np.atleast_2d(starts)
    t_grid = default_t_grid(params.n) if t_grid is None else t_grid
    inc = conditional_increments(x0, params.beta, d, t_grid, n_noise, increment_config(cfg, t_grid),
                                 stream(params.seed, 20, d), control_variate)
    first_t, mixed_t, plain_t = increment_targets(inc.start_sums, params.n, d, params.beta)
    entries = []
    worst = 0.0
    inconclusive = False
    for name, target in (("first", first_t), ("mixed", mixed_t), ("plain", plain_t)):
        est, se = inc.extrapolated(name)
        target = np.broadcast_to(target, est.shape)
        for idx in np.ndindex(est.shape[1:]):
            sl = (slice(None),) + idx
            err = relative_l1(est[sl], target[sl])
            scale = float(np.mean(np.abs(target[sl])))
            noise = float(np.sqrt(np.mean(se[sl] ** 2)))
            flag = scale > 0 and noise > 0.5 * scale
            inconclusive |= flag
            worst = max(worst, err)
            entries.append({"kind": name, "index": [i + 1 for i in idx], "relative_l1": err,
                            "mean_abs_target": scale, "rms_se": noise, "inconclusive": bool(flag)})
    return {"n": params.n, "beta": params.beta, "d": d, "m": int(x0.shape[0]), "n_noise": n_noise,
            "t_grid": list(map(float, t_grid)), "control_variate": control_variate,
            "entries": entries, "max_relative_l1": worst, "inconclusive": bool(inconclusive),
            "passed": bool(worst <= tolerance and not inconclusive)}


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def cubic_increment_scaling(params: EnsembleParams, d: int, t_grid=None, m: int = 2000,
                            cfg: DbmConfig | None = None) -> dict:
    """Log-log slopes of ``E|W_t - W|^3`` and ``E|W_t - W|^2`` in ``t`` from stationary starts."""
    if t_grid is None:
        t_grid = np.geomspace(0.01, 0.1, 5) / params.n**2
    times = np.sort(np.asarray(t_grid, dtype=float))
    if np.any(times <= 0):
        raise ValueError("t = 0 is excluded")
    x0 = verblunsky_sample(params, m).angles
    marks, states = evolve_batch(x0, params.beta, float(times[-1]), cfg or DbmConfig(),
                                 stream(params.seed, 21, d), checkpoints=times)
    w0 = power_sums(x0, d)
    second, third = [], []
    for t in times:
        i = int(np.argmin(np.abs(marks - t)))
        dist = np.linalg.norm(power_sums(states[i], d) - w0, axis=-1)
        second.append(mean_and_se(dist**2))
        third.append(mean_and_se(dist**3))
    s2 = np.array([v[0] for v in second])
    s3 = np.array([v[0] for v in third])
    decade = times[-1] / times[0] >= 10 * (1 - 1e-9)
    return {"n": params.n, "beta": params.beta, "d": d, "m": m, "t_grid": times.tolist(),
            "second": s2.tolist(), "second_se": [float(v[1]) for v in second],
            "third": s3.tolist(), "third_se": [float(v[1]) for v in third],
            "slope_third": loglog_slope(times, s3), "slope_second": loglog_slope(times, s2),
            "degenerate": bool(not decade or times.size < 3)}


def _bound_samples(p: np.ndarray, n: int, d: int, beta: float):
    """Per-sample ``|R|``, ``||S||_HS``, ``||T||_HS`` and the bound integrand."""
    R, S, T = stein_terms(p, n, d, beta)
    r = np.linalg.norm(R, axis=-1)
    s = np.sqrt(np.sum(np.abs(S) ** 2, axis=(-2, -1)))
    t = np.sqrt(np.sum(np.abs(T) ** 2, axis=(-2, -1)))
    lam_inv = (2 / beta) / n
    sig_inv_sqrt = math.sqrt(beta / 2)
    return r, s, t, lam_inv * (r + sig_inv_sqrt / (2 * math.pi) * (s + t))


def wasserstein_bound_mc(batch, d: int, beta: float | None = None, n: int | None = None) -> dict:
    """``||Lambda^-1|| (E|R| + ||Sigma^-1/2|| E(||S|| + ||T||) / (2 pi))`` with a standard error.

    The expectations are sample means; the error of the whole bound is the
    error of the mean of its per-sample integrand, which is linear.
    """
    beta = batch.params.beta if beta is None else beta
    n = batch.params.n if n is None else n
    r, s, t, total = _bound_samples(batch.power_sums(2 * d), n, d, beta)
    out = {"n": n, "beta": beta, "d": d, "m": int(total.size)}
    for name, v in (("R", r), ("S", s), ("T", t), ("bound", total)):
        mean, se = mean_and_se(v)
        out[name], out[name + "_se"] = float(mean), float(se)
    return out


def _fit(xs, ys, ses):
    ys, ses = np.asarray(ys), np.asarray(ses)
    if len(xs) < 3 or np.any(ys <= 0):
        return None, True
    return loglog_slope(xs, ys), bool(np.any(ses > 0.1 * ys))


def scaling_audit(beta: float, d_grid, n_grid, m: int, seed: int = 0, n_fixed: int | None = None,
                  d_fixed: int = 2, workers: int | None = None) -> dict:
    """Exponent fits of the bound ingredients in ``d`` (at ``n_fixed``) and of the bound in ``n`` (at ``d_fixed``)."""
    d_grid, n_grid = sorted(d_grid), sorted(n_grid)
    n_fixed = max(n_grid) if n_fixed is None else n_fixed
    dmax = max(max(d_grid), d_fixed)
    rows = []
    cache = {}

    def sums(n):
        if n not in cache:
            cache[n] = verblunsky_power_sums(EnsembleParams(n, beta, seed), m, 2 * dmax, workers)
        return cache[n]

    for d in d_grid:
        rows.append(("d", wasserstein_bound_mc(sums(n_fixed), d, beta, n_fixed)))
    for n in n_grid:
        rows.append(("n", wasserstein_bound_mc(sums(n), d_fixed, beta, n)))
    for _, r in rows:
        r["ratio"] = r["bound"] / (r["d"] ** 3.5 / r["n"])

    by_d = [r for kind, r in rows if kind == "d"]
    by_n = [r for kind, r in rows if kind == "n"]
    r_pts = [r for r in by_d if r["d"] >= 2 or beta != 2]
    slopes, flags = {}, {}
    slopes["R_vs_d"], flags["R_vs_d"] = _fit([r["d"] for r in r_pts], [r["R"] for r in r_pts],
                                            [r["R_se"] for r in r_pts])
    for key in ("S", "T"):
        slopes[f"{key}_vs_d"], flags[f"{key}_vs_d"] = _fit([r["d"] for r in by_d], [r[key] for r in by_d],
                                                          [r[key + "_se"] for r in by_d])
    slopes["bound_vs_n"], flags["bound_vs_n"] = _fit([r["n"] for r in by_n], [r["bound"] for r in by_n],
                                                    [r["bound_se"] for r in by_n])
    ratios = [r["ratio"] for _, r in rows]
    return {"beta": beta, "m": m, "seed": seed, "n_fixed": n_fixed, "d_fixed": d_fixed,
            "d_grid": d_grid, "n_grid": n_grid, "slopes": slopes, "under_resolved": flags,
            "ratio_range": [min(ratios), max(ratios)],
            "rows": [dict(r, axis=kind) for kind, r in rows]}


def write_audit(report: dict, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    js, cs = out_dir / "scaling_audit.json", out_dir / "scaling_audit.csv"
    js.write_text(json.dumps(report, indent=2))
    cols = ["axis", "d", "n", "R", "R_se", "S", "S_se", "T", "T_se", "bound", "bound_se", "ratio"]
    with open(cs, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in report["rows"]:
            w.writerow(r)
    return [js, cs]
