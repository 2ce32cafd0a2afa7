"""Circular Dyson Brownian motion.

    dx_j = (beta/2) sum_{i != j} cot((x_j - x_i)/2) dt + sqrt(2) db_j

integrated with explicit Euler-Maruyama on batches of paths. A step that
would change the cyclic order of the particles counts as a collision; under
the default policy it is rejected and retried as two half steps whose noise
is refined by a Brownian bridge, so the path itself is unchanged.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numba import njit

from .ensemble import TWO_PI, EnsembleParams, reduce_angles, verblunsky_sample
from .rng import stream
from .statistics import mean_and_se, power_sums, signed_power_sums


class CollisionError(ValueError):
    """Two angles coincide, so the drift is undefined."""


class StepUnderflowError(RuntimeError):
    """Reject-and-halve shrank the step below the allowed minimum."""


@dataclass(frozen=True)
class DbmConfig:
    dt: float | None = None
    collision_policy: str = "reject-and-halve"
    drift_cap: float | None = None
    max_halvings: int = 40
    min_dt: float = 1e-12

    def resolved(self, n: int) -> "DbmConfig":
        cfg = DbmConfig(
            dt=1e-3 / n**2 if self.dt is None else float(self.dt),
            collision_policy=self.collision_policy,
            drift_cap=0.1 * TWO_PI / n if self.drift_cap is None else float(self.drift_cap),
            max_halvings=self.max_halvings,
            min_dt=self.min_dt,
        )
        if not cfg.dt > 0:
            raise ValueError("dt must be positive")
        if cfg.collision_policy not in ("reject-and-halve", "drift-cap"):
            raise ValueError(f"unknown collision policy {cfg.collision_policy!r}")
        if not cfg.drift_cap > 0:
            raise ValueError("drift_cap must be positive")
        return cfg


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.times.ndim != 1 or self.times.size != self.states.shape[0]:
            raise ValueError("one state per time required")
        if self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0):
            raise ValueError("times must start at 0 and increase strictly")

    def save(self, path: str | Path, params: EnsembleParams | None = None) -> tuple[Path, Path]:
        path = Path(path)
        data_path, meta_path = path.with_suffix(".csv"), path.with_suffix(".json")
        n = self.states.shape[1]
        header = "t," + ",".join(f"x{j + 1}" for j in range(n))
        np.savetxt(data_path, np.column_stack([self.times, self.states]), delimiter=",",
                   fmt="%.17g", header=header, comments="")
        meta = {"n": n, "points": int(self.times.size)}
        if params is not None:
            meta["params"] = {"n": params.n, "beta": params.beta, "seed": params.seed}
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
        return data_path, meta_path

    @classmethod
    def load(cls, path: str | Path) -> "Trajectory":
        data = np.loadtxt(Path(path).with_suffix(".csv"), delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1:])


# -- drift ---------------------------------------------------------------------

@njit(cache=True)
def _drift_batch(x, half_beta, out):
    """Fill ``out`` with the drift; return False on an exact coincidence."""
    paths, n = x.shape
    cs = np.empty(n)
    sn = np.empty(n)
    for p in range(paths):
        for j in range(n):
            out[p, j] = 0.0
        for j in range(n):
            cs[j] = math.cos(x[p, j])
            sn[j] = math.sin(x[p, j])
        for j in range(n):
            for i in range(j + 1, n):
                # cot((x_j - x_i)/2) = -Im((z_j + z_i)/(z_j - z_i))
                a, b = cs[j] + cs[i], sn[j] + sn[i]
                c, d = cs[j] - cs[i], sn[j] - sn[i]
                den = c * c + d * d
                if den == 0.0:
                    return False
                c = half_beta * (a * d - b * c) / den
                out[p, j] += c
                out[p, i] -= c
    return True


def drift(x, beta: float) -> np.ndarray:
    """``(beta/2) sum_{i != j} cot((x_j - x_i)/2)`` for each particle ``j``."""
    x = np.asarray(x, dtype=float)
    flat = np.ascontiguousarray(x.reshape(-1, x.shape[-1]))
    out = np.empty_like(flat)
    if not _drift_batch(flat, 0.5 * beta, out):
        raise CollisionError("coinciding angles")
    return out.reshape(x.shape)


def _order_preserved(x, y) -> np.ndarray:
    """True where the unwrapped update ``y`` of sorted ``x`` keeps the cyclic order."""
    if x.shape[-1] == 1:
        return np.all(np.isfinite(y), axis=-1)
    gaps = np.diff(y, axis=-1)
    wrap = y[..., 0] + TWO_PI - y[..., -1]
    return np.all(gaps > 0, axis=-1) & (wrap > 0) & np.all(np.isfinite(y), axis=-1)


@njit(cache=True)
def _em_kernel(x, db, h, half_beta, cap, capped, out, ok):
    """Fused Euler-Maruyama step: drift, update, order check, reduce and sort.

    Rows with ``ok[p] == False`` are left for the caller to refine.
    Returns False if some row has coinciding angles.
    """
    paths, n = x.shape
    dr = np.empty(n)
    y = np.empty(n)
    cs = np.empty(n)
    sn = np.empty(n)
    s2 = math.sqrt(2.0)
    for p in range(paths):
        for j in range(n):
            dr[j] = 0.0
        for j in range(n):
            cs[j] = math.cos(x[p, j])
            sn[j] = math.sin(x[p, j])
        for j in range(n):
            for i in range(j + 1, n):
                # cot((x_j - x_i)/2) = -Im((z_j + z_i)/(z_j - z_i))
                a, b = cs[j] + cs[i], sn[j] + sn[i]
                c, d = cs[j] - cs[i], sn[j] - sn[i]
                den = c * c + d * d
                if den == 0.0:
                    return False
                c = half_beta * (a * d - b * c) / den
                dr[j] += c
                dr[i] -= c
        good = True
        for j in range(n):
            d = dr[j] * h
            if capped:
                d = min(max(d, -cap), cap)
            y[j] = x[p, j] + d + s2 * db[p, j]
            if not math.isfinite(y[j]):
                good = False
        if good and not capped and n > 1:
            for j in range(n - 1):
                if not y[j + 1] - y[j] > 0.0:
                    good = False
            if not y[0] + TWO_PI - y[n - 1] > 0.0:
                good = False
        ok[p] = good
        if not good:
            continue
        for j in range(n):
            v = y[j] % TWO_PI
            if v >= TWO_PI:
                v = 0.0
            # insertion sort; the row is a rotation of a sorted one
            k = j
            while k > 0 and out[p, k - 1] > v:
                out[p, k] = out[p, k - 1]
                k -= 1
            out[p, k] = v
    return True


# -- stepping --------------------------------------------------------------------

Observer = Callable[[np.ndarray, np.ndarray, np.ndarray, float], None]


class _Stepper:
    """Advance a batch of paths; ``observer(x_pre, noise_disp, idx, h)`` sees every accepted (sub)step."""

    def __init__(self, beta: float, cfg: DbmConfig, rng: np.random.Generator | None,
                 observer: Observer | None):
        self.beta = beta
        self.cfg = cfg
        self.rng = rng
        self.observer = observer
        self.halvings = 0

    def _tentative(self, x, h, db):
        dr = drift(x, self.beta) * h
        if self.cfg.collision_policy == "drift-cap":
            np.clip(dr, -self.cfg.drift_cap, self.cfg.drift_cap, out=dr)
        return x + dr + math.sqrt(2.0) * db

    def step(self, x, h, db, idx=None):
        """One step of size ``h`` with Brownian increments ``db`` (variance ``h``)."""
        idx = np.arange(x.shape[0]) if idx is None else idx
        x = np.ascontiguousarray(x)
        out = np.empty_like(x)
        ok = np.empty(x.shape[0], dtype=np.bool_)
        capped = self.cfg.collision_policy == "drift-cap"
        if not _em_kernel(x, np.ascontiguousarray(db), h, 0.5 * self.beta, self.cfg.drift_cap, capped, out, ok):
            raise CollisionError("coinciding angles")
        if self.observer is not None and np.any(ok):
            self.observer(x[ok], math.sqrt(2.0) * db[ok], idx[ok], h)
        for b in np.flatnonzero(~ok):
            if capped:
                raise CollisionError("non-finite update under drift-cap")
            out[b] = self._refine(x[b:b + 1], h, db[b:b + 1], idx[b:b + 1], 1)[0]
        return out

    def _refine(self, x, h, db, idx, depth):
        if depth > self.cfg.max_halvings or h / 2 < self.cfg.min_dt:
            raise StepUnderflowError(f"step size fell below {self.cfg.min_dt:g} after {depth - 1} halvings")
        if self.rng is None:
            raise CollisionError("collision needs a random stream to refine the step")
        self.halvings += 1
        half = 0.5 * h
        first = 0.5 * db + math.sqrt(0.25 * h) * self.rng.standard_normal(db.shape)
        second = db - first
        for part in (first, second):
            y = self._tentative(x, half, part)
            if _order_preserved(x, y)[0]:
                if self.observer is not None:
                    self.observer(x, math.sqrt(2.0) * part, idx, half)
                x = reduce_angles(y)
            else:
                x = self._refine(x, half, part, idx, depth + 1)
        return x


def dbm_step(x, beta: float, dt: float, noise, cfg: DbmConfig | None = None,
             rng: np.random.Generator | None = None) -> np.ndarray:
    """One Euler-Maruyama step ``x + drift dt + sqrt(2 dt) noise``, reduced and sorted.

    ``x`` may be one configuration or an ``(paths, n)`` stack; ``noise`` has
    the same shape and holds standard normal draws.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    cfg = (cfg or DbmConfig()).resolved(xb.shape[-1])
    db = math.sqrt(dt) * np.atleast_2d(np.asarray(noise, dtype=float))
    out = _Stepper(beta, cfg, rng, None).step(xb, dt, db)
    return out[0] if single else out


def time_grid(t: float, dt: float, checkpoints: Sequence[float] = ()) -> np.ndarray:
    """Step times from 0 to ``t`` with spacing ``dt``, also hitting every checkpoint."""
    if not t > 0:
        raise ValueError("t must be positive")
    steps = int(math.ceil(t / dt - 1e-9))
    grid = np.minimum(np.arange(steps + 1) * dt, t)
    grid = np.union1d(grid, np.asarray([c for c in checkpoints if 0 < c < t], dtype=float))
    grid[-1] = t
    keep = np.concatenate([[True], np.diff(grid) > 1e-15 * max(t, 1.0)])
    return grid[keep]


def evolve_batch(x0, beta: float, t: float, cfg: DbmConfig, rng: np.random.Generator,
                 checkpoints: Sequence[float] = (), observer: Observer | None = None):
    """Evolve each row of ``x0`` to time ``t``.

    Returns ``(times, states)`` where ``times`` are the sorted checkpoints
    (always including ``0`` and ``t``) and ``states[i]`` is the batch there.
    """
    x = reduce_angles(np.atleast_2d(np.asarray(x0, dtype=float)))
    cfg = cfg.resolved(x.shape[-1])
    grid = time_grid(t, cfg.dt, checkpoints)
    marks = np.union1d([0.0, t], [c for c in checkpoints if 0 < c < t])
    stepper = _Stepper(beta, cfg, rng, observer)
    states = [x.copy()]
    mark = 1
    for a, b in zip(grid[:-1], grid[1:]):
        h = b - a
        db = math.sqrt(h) * rng.standard_normal(x.shape)
        x = stepper.step(x, h, db)
        while mark < marks.size and abs(marks[mark] - b) <= 1e-12 * max(t, 1.0):
            states.append(x.copy())
            mark += 1
    return marks, np.stack(states)


def dbm_evolve(x, beta: float, t: float, cfg: DbmConfig | None = None,
               rng: np.random.Generator | None = None, checkpoints: Sequence[float] = ()) -> Trajectory:
    """One path from ``x`` to time ``t``, recorded at ``0``, the checkpoints and ``t``."""
    rng = np.random.default_rng(0) if rng is None else rng
    times, states = evolve_batch(np.asarray(x, dtype=float)[None, :], beta, t, cfg or DbmConfig(), rng,
                                 checkpoints)
    return Trajectory(times, states[:, 0, :])


# -- stationarity and exchangeability --------------------------------------------

def _starts(params: EnsembleParams, m: int, starts) -> np.ndarray:
    if starts is not None:
        starts = np.atleast_2d(np.asarray(starts, dtype=float))
        if starts.shape[0] == 1 and m > 1:
            starts = np.repeat(starts, m, axis=0)
        return reduce_angles(starts)
    return verblunsky_sample(params, m).angles


def stationarity_test(params: EnsembleParams, t: float, m: int, cfg: DbmConfig | None = None,
                      kmax: int = 3, starts=None, threshold: float = 3.0) -> dict:
    """Paired z-scores for the change of ``E|p_k|^2`` between time 0 and ``t``.

    Starts are independent CbetaE samples unless ``starts`` is given (a
    single configuration is replicated ``m`` times).
    """
    if m < 2:
        raise ValueError("need m >= 2 paths")
    x0 = _starts(params, m, starts)
    if t == 0:
        xt = x0
    else:
        _, states = evolve_batch(x0, params.beta, t, cfg or DbmConfig(), stream(params.seed, 10))
        xt = states[-1]
    before = np.abs(power_sums(x0, kmax)) ** 2
    after = np.abs(power_sums(xt, kmax)) ** 2
    diff = after - before
    mean, se = mean_and_se(diff)
    z = np.divide(mean, se, out=np.zeros_like(mean), where=se > 0)
    return {
        "n": params.n, "beta": params.beta, "t": t, "m": m,
        "k": list(range(1, kmax + 1)),
        "moment_t0": before.mean(axis=0).tolist(),
        "moment_t": after.mean(axis=0).tolist(),
        "z": z.tolist(),
        "stationary": bool(np.all(np.abs(z) <= threshold)),
        "reliable": m >= 500,
    }


ANTISYMMETRIC = {
    "u-v": lambda u, v: u - v,
    "uv(u-v)": lambda u, v: u * v * (u - v),
    "(u-v)^3": lambda u, v: (u - v) ** 3,
}


def symmetry_scores(u, v) -> dict[str, float]:
    """z-scores of antisymmetric statistics; all have mean 0 if ``(u, v)`` is exchangeable."""
    out = {}
    for name, h in ANTISYMMETRIC.items():
        mean, se = mean_and_se(h(np.asarray(u), np.asarray(v)))
        out[name] = float(mean / se) if se > 0 else 0.0
    return out


def exchangeability_test(params: EnsembleParams, t: float, m: int, cfg: DbmConfig | None = None,
                         starts=None, threshold: float = 3.0) -> dict:
    """Compare ``(Re p_1(x(0)), Re p_1(x(t)))`` with its swap."""
    x0 = _starts(params, m, starts)
    if t == 0:
        xt = x0
    else:
        _, states = evolve_batch(x0, params.beta, t, cfg or DbmConfig(), stream(params.seed, 11))
        xt = states[-1]
    u = power_sums(x0, 1)[:, 0].real
    v = power_sums(xt, 1)[:, 0].real
    z = symmetry_scores(u, v)
    return {"n": params.n, "beta": params.beta, "t": t, "m": m, "z": z,
            "max_abs_z": max(abs(s) for s in z.values()),
            "symmetric": bool(all(abs(s) <= threshold for s in z.values()))}


# -- conditional increments ------------------------------------------------------

def extrapolation_weights(t_grid) -> np.ndarray:
    """Weights ``w`` with ``sum_i w_i y(t_i)`` the intercept of a least-squares line in ``t``."""
    t = np.asarray(t_grid, dtype=float)
    if t.size < 2:
        raise ValueError("need at least two times to extrapolate")
    design = np.column_stack([np.ones_like(t), t])
    return np.linalg.pinv(design)[0]


@dataclass
class IncrementEstimates:
    """Per-start conditional increment rates ``(1/t) E[. | x]`` at each time.

    ``first[i]`` has shape ``(m, n_noise, d)``; ``mixed[i]``/``plain[i]`` are
    ``(m, n_noise, d, d)``. Values are kept per noise path so that errors of
    any linear combination across times can be computed exactly.
    """

    times: np.ndarray
    first: np.ndarray
    mixed: np.ndarray
    plain: np.ndarray
    start_sums: np.ndarray

    def extrapolated(self, which: str):
        """Per-start intercept at ``t -> 0`` and its standard error."""
        data = getattr(self, which)
        w = extrapolation_weights(self.times)
        per_path = np.tensordot(w, data, axes=(0, 0))
        mean = per_path.mean(axis=1)
        k = per_path.shape[1]
        var = per_path.real.var(axis=1, ddof=1) + (per_path.imag.var(axis=1, ddof=1)
                                                   if np.iscomplexobj(per_path) else 0.0)
        return mean, np.sqrt(var / k)

    def at(self, which: str, i: int):
        data = getattr(self, which)[i]
        return data.mean(axis=1)


class _IncrementObserver:
    """Accumulates zero-mean control variates for the increment functionals.

    Per step with noise displacement ``dB`` (variance ``2h`` per particle):

    * ``dM_k = sum_m i k z_m^k dB_m`` and the second order term
      ``-(k^2/2) sum_m z_m^k (dB_m^2 - 2h)`` for ``W`` itself;
    * ``dM_j conj(D_k) + D_j conj(dM_k)`` plus ``dM_j conj(dM_k)`` minus its
      conditional mean ``2 j k p_{j-k} h`` for the mixed product;
    * the same with ``conj`` dropped, centred by ``-2 j k p_{j+k} h``.

    Each term has zero conditional mean given the pre-step state, so
    subtracting the sums leaves every expectation unchanged and only removes
    noise.
    """

    def __init__(self, paths: int, d: int, w0: np.ndarray):
        self.d = d
        self.w0 = w0
        self.c1 = np.zeros((paths, d), dtype=complex)
        self.c2 = np.zeros((paths, d, d), dtype=complex)
        self.c3 = np.zeros((paths, d, d), dtype=complex)
        k = np.arange(1, d + 1)
        self.k = k
        self.jk = np.outer(k, k)
        self.diff = k[:, None] - k[None, :]
        self.sum = k[:, None] + k[None, :]

    def __call__(self, x, disp, idx, h):
        d = self.d
        z = np.exp(1j * x)
        zk = z.copy()
        rows = x.shape[0]
        dm = np.empty((rows, d), dtype=complex)
        second = np.empty_like(dm)
        p = np.empty((rows, 2 * d), dtype=complex)
        centred = disp**2 - 2.0 * h
        for k in range(1, 2 * d + 1):
            p[:, k - 1] = zk.sum(axis=-1)
            if k <= d:
                dm[:, k - 1] = 1j * k * np.sum(zk * disp, axis=-1)
                second[:, k - 1] = -0.5 * k * k * np.sum(zk * centred, axis=-1)
            zk = zk * z
        dw = p[:, :d] - self.w0[idx]
        n = x.shape[-1]
        qv_mixed = 2 * self.jk * signed_power_sums(p, n, self.diff) * h
        qv_plain = -2 * self.jk * signed_power_sums(p, n, self.sum) * h
        self.c1[idx] += dm + second
        self.c2[idx] += (dm[:, :, None] * np.conj(dw)[:, None, :] + dw[:, :, None] * np.conj(dm)[:, None, :]
                         + dm[:, :, None] * np.conj(dm)[:, None, :] - qv_mixed)
        self.c3[idx] += (dm[:, :, None] * dw[:, None, :] + dw[:, :, None] * dm[:, None, :]
                         + dm[:, :, None] * dm[:, None, :] - qv_plain)


def conditional_increments(starts, beta: float, d: int, t_grid, n_noise: int, cfg: DbmConfig,
                           rng: np.random.Generator, control_variate: bool = True) -> IncrementEstimates:
    """Common-start averaging of ``W_t - W`` moments for ``W = (p_1, ..., p_d)``.

    Each start is replicated ``n_noise`` times and evolved to ``max(t_grid)``;
    the rates ``(W_t - W)/t``, ``(W_t - W)(W_t - W)^*/t`` and
    ``(W_t - W)(W_t - W)^T/t`` are recorded at every time in ``t_grid``.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    m, n = starts.shape
    times = np.sort(np.asarray(t_grid, dtype=float))
    x0 = np.repeat(reduce_angles(starts), n_noise, axis=0)
    w0 = power_sums(x0, d)
    paths = x0.shape[0]
    obs = _IncrementObserver(paths, d, w0) if control_variate else None

    first, mixed, plain = [], [], []
    x = x0
    t_prev = 0.0
    for t in times:
        _, states = evolve_batch(x, beta, t - t_prev, cfg, rng, observer=obs)
        x = states[-1]
        t_prev = t
        dw = power_sums(x, d) - w0
        mix = dw[:, :, None] * np.conj(dw)[:, None, :]
        pla = dw[:, :, None] * dw[:, None, :]
        if obs is not None:
            dw = dw - obs.c1
            mix = mix - obs.c2
            pla = pla - obs.c3
        first.append((dw / t).reshape(m, n_noise, d))
        mixed.append((mix / t).reshape(m, n_noise, d, d))
        plain.append((pla / t).reshape(m, n_noise, d, d))
    return IncrementEstimates(times, np.stack(first), np.stack(mixed), np.stack(plain),
                              power_sums(starts, 2 * d))


def default_t_grid(n: int, scale: float = 0.05) -> list[float]:
    t0 = scale / n**2
    return [t0, t0 / 2, t0 / 4]


def increment_config(cfg: DbmConfig | None, t_grid) -> DbmConfig:
    """Default integrator for increment estimates: 100 steps across the smallest time."""
    return DbmConfig(dt=min(t_grid) / 100) if cfg is None else cfg


def relative_l1(estimate, target) -> float:
    """``sum |estimate - target| / sum |target|`` (0 when both vanish)."""
    num = float(np.sum(np.abs(np.asarray(estimate) - np.asarray(target))))
    den = float(np.sum(np.abs(target)))
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


def estimate_drift_limit(params: EnsembleParams, k: int, t_grid=None, m: int = 200, n_noise: int = 64,
                         cfg: DbmConfig | None = None, starts=None, control_variate: bool = True,
                         tolerance: float = 0.05) -> dict:
    """Extrapolated ``(1/t) E[p_k(x(t)) - p_k(x) | x]`` against ``L_beta p_k(x)``."""
    from .stein import apply_generator_pk

    x0 = _starts(params, m, starts)
    t_grid = default_t_grid(params.n) if t_grid is None else t_grid
    target = apply_generator_pk(x0, k, params.beta)
    if k == 0:
        est = np.zeros(x0.shape[0], dtype=complex)
        se = np.zeros(x0.shape[0])
    else:
        kk = abs(k)
        inc = conditional_increments(x0, params.beta, kk, t_grid, n_noise, increment_config(cfg, t_grid),
                                     stream(params.seed, 12, kk), control_variate)
        est, se = inc.extrapolated("first")
        est, se = est[:, kk - 1], se[:, kk - 1]
        if k < 0:
            est = np.conj(est)
    err = relative_l1(est, target)
    scale = float(np.mean(np.abs(target)))
    noise = float(np.sqrt(np.mean(se**2))) if se.size else 0.0
    inconclusive = scale > 0 and noise > 0.5 * scale
    return {
        "n": params.n, "beta": params.beta, "k": k, "t_grid": list(map(float, t_grid)),
        "m": int(x0.shape[0]), "n_noise": n_noise,
        "relative_l1": err, "mean_abs_target": scale, "rms_se": noise,
        "inconclusive": bool(inconclusive),
        "recommended_m": int(math.ceil(x0.shape[0] * (noise / (0.1 * scale)) ** 2)) if inconclusive else None,
        "passed": bool(err <= tolerance and not inconclusive),
    }
