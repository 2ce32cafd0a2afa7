"""The circular beta-ensemble: density, normalization and samplers.

Configurations are plain float arrays of angles in ``[0, 2*pi)`` sorted
ascending; batches are ``(m, n)`` arrays with one configuration per row.
Two samplers are provided. ``mcmc_sample`` runs single-site Metropolis
chains on the unnormalized density. ``verblunsky_sample`` draws the exact
law from independent Verblunsky coefficients and recovers the eigenangles
of the associated CMV matrix from its monotone Pruefer phase.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from numba import njit
from scipy.special import gammaln

from .rng import chunk_sizes, parallel_map, stream

TWO_PI = 2.0 * math.pi

# Retained samples per independent stream; fixed so results do not depend on workers.
CHUNK = 500


@dataclass(frozen=True)
class EnsembleParams:
    n: int
    beta: float
    seed: int = 0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n must be a positive integer, got {self.n!r}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta!r}")
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class McmcConfig:
    """Metropolis settings; ``None`` fields take the n-dependent defaults."""

    proposal_scale: float | None = None
    burn_in: int | None = None
    thinning: int | None = None
    proposal: str = "gaussian"
    chains: int = 1

    def resolved(self, n: int) -> "McmcConfig":
        cfg = McmcConfig(
            proposal_scale=TWO_PI / n if self.proposal_scale is None else float(self.proposal_scale),
            burn_in=200 * n if self.burn_in is None else int(self.burn_in),
            thinning=n if self.thinning is None else int(self.thinning),
            proposal=self.proposal,
            chains=int(self.chains),
        )
        if not cfg.proposal_scale > 0:
            raise ValueError("proposal_scale must be positive")
        if cfg.burn_in < 0 or cfg.thinning < 1 or cfg.chains < 1:
            raise ValueError("burn_in >= 0, thinning >= 1 and chains >= 1 required")
        if cfg.proposal not in ("gaussian", "uniform"):
            raise ValueError(f"unknown proposal {cfg.proposal!r}")
        return cfg


@dataclass
class SampleBatch:
    angles: np.ndarray
    params: EnsembleParams
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.angles = np.atleast_2d(np.asarray(self.angles, dtype=float))
        if self.angles.shape[0] < 1:
            raise ValueError("a batch holds at least one configuration")
        if self.angles.shape[1] != self.params.n:
            raise ValueError("configuration length does not match params.n")

    @property
    def m(self) -> int:
        return self.angles.shape[0]

    def __len__(self) -> int:
        return self.m

    def power_sums(self, kmax: int) -> np.ndarray:
        """``(m, kmax)`` array of ``p_1..p_kmax`` per configuration."""
        from .statistics import power_sums

        return power_sums(self.angles, kmax)

    def save(self, path: str | Path) -> tuple[Path, Path]:
        """Write ``<path>.csv`` (one configuration per row) and ``<path>.json``."""
        path = Path(path)
        data_path = path.with_suffix(".csv")
        meta_path = path.with_suffix(".json")
        header = ",".join(f"x{j + 1}" for j in range(self.params.n))
        np.savetxt(data_path, self.angles, delimiter=",", fmt="%.17g", header=header, comments="")
        meta = {"params": asdict(self.params), "provenance": self.provenance, "m": self.m}
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
        return data_path, meta_path

    @classmethod
    def load(cls, path: str | Path) -> "SampleBatch":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        angles = np.loadtxt(path.with_suffix(".csv"), delimiter=",", skiprows=1, ndmin=2)
        return cls(angles, EnsembleParams(**meta["params"]), meta["provenance"])


def as_configuration(x) -> np.ndarray:
    """Validate and return a configuration (sorted angles in ``[0, 2*pi)``)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 1:
        raise ValueError("a configuration is a non-empty 1-d array of angles")
    if not np.all(np.isfinite(x)) or np.any(x < 0) or np.any(x >= TWO_PI):
        raise ValueError("angles must lie in [0, 2*pi)")
    if np.any(np.diff(x) < 0):
        raise ValueError("angles must be sorted ascending")
    return x


def reduce_angles(x) -> np.ndarray:
    """Reduce mod 2*pi into ``[0, 2*pi)`` and sort along the last axis."""
    y = np.mod(x, TWO_PI)
    y[y >= TWO_PI] = 0.0
    return np.sort(y, axis=-1)


# -- normalization and density ------------------------------------------------

def log_selberg_constant(n: int, beta: float) -> float:
    """``log Z_{n,beta} = log Gamma(1 + n beta/2) - n log Gamma(1 + beta/2)``."""
    if n < 1 or not beta > 0:
        raise ValueError("need n >= 1 and beta > 0")
    return float(gammaln(1.0 + 0.5 * n * beta) - n * gammaln(1.0 + 0.5 * beta))


def selberg_constant(n: int, beta: float) -> float:
    log_z = log_selberg_constant(n, beta)
    if log_z > np.log(np.finfo(float).max):
        raise OverflowError(f"Z_(n={n}, beta={beta}) exceeds double range; use log_selberg_constant")
    return math.exp(log_z)


def log_density_unnormalized(x, beta: float) -> np.ndarray | float:
    """``beta * sum_{j<k} log|e^{i x_j} - e^{i x_k}|``; ``-inf`` on coincidences.

    Accepts a single configuration or a stack of them (last axis = angles).
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    j, k = np.triu_indices(n, 1)
    chord = np.abs(2.0 * np.sin(0.5 * (x[..., j] - x[..., k])))
    with np.errstate(divide="ignore"):
        out = beta * np.sum(np.log(chord), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


# -- Metropolis sampler --------------------------------------------------------

@njit(cache=True)
def _site_log_ratio(x, i, new, beta):
    old = x[i]
    acc = 0.0
    for j in range(x.shape[0]):
        if j == i:
            continue
        a = abs(2.0 * math.sin(0.5 * (new - x[j])))
        if a == 0.0:
            return -np.inf
        b = abs(2.0 * math.sin(0.5 * (old - x[j])))
        acc += math.log(a) - math.log(b)
    return beta * acc


@njit(cache=True)
def _metropolis(x, beta, steps, offsets, log_u):
    """Systematic-scan single-site Metropolis; ``offsets``/``log_u`` are per update."""
    n = x.shape[0]
    accepted = 0
    two_pi = 2.0 * math.pi
    for s in range(steps):
        i = s % n
        new = (x[i] + offsets[s]) % two_pi
        if new >= two_pi:
            new = 0.0
        if log_u[s] < _site_log_ratio(x, i, new, beta):
            x[i] = new
            accepted += 1
    return accepted


def mh_log_ratio(x, i: int, new_angle: float, beta: float) -> float:
    """Log acceptance ratio for moving angle ``i`` of ``x`` to ``new_angle``."""
    return float(_site_log_ratio(np.asarray(x, dtype=float), int(i), float(new_angle), float(beta)))


def _proposals(rng: np.random.Generator, size: int, cfg: McmcConfig):
    if cfg.proposal == "gaussian":
        offsets = cfg.proposal_scale * rng.standard_normal(size)
    else:
        offsets = rng.uniform(-cfg.proposal_scale, cfg.proposal_scale, size)
    return offsets, np.log(rng.random(size))


def _run_chain(task):
    params, cfg, m, chain = task
    rng = stream(params.seed, 1, chain)
    n = params.n
    x = np.sort(rng.uniform(0.0, TWO_PI, n))
    accepted = 0
    proposed = 0
    # burn-in in bounded blocks to keep memory flat
    remaining = cfg.burn_in * n
    while remaining > 0:
        block = min(remaining, 1 << 20)
        off, lu = _proposals(rng, block, cfg)
        _metropolis(x, params.beta, block, off, lu)
        remaining -= block
    out = np.empty((m, n))
    for r in range(m):
        steps = cfg.thinning * n
        off, lu = _proposals(rng, steps, cfg)
        accepted += _metropolis(x, params.beta, steps, off, lu)
        proposed += steps
        out[r] = np.sort(x)
    return out, accepted, proposed


def mcmc_sample(params: EnsembleParams, m: int, cfg: McmcConfig | None = None,
                workers: int | None = None) -> SampleBatch:
    """Retain ``m`` configurations from Metropolis chains targeting the CbetaE.

    The ``m`` samples are split evenly over ``cfg.chains`` chains, each with
    its own stream derived from ``(seed, chain)``.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    cfg = (cfg or McmcConfig()).resolved(params.n)
    chains = min(cfg.chains, m)
    sizes = [m // chains + (1 if c < m % chains else 0) for c in range(chains)]
    results = parallel_map(_run_chain, [(params, cfg, sz, c) for c, sz in enumerate(sizes)], workers)
    angles = np.concatenate([r[0] for r in results])
    accepted = sum(r[1] for r in results)
    proposed = sum(r[2] for r in results)
    provenance = {
        "sampler": "metropolis",
        "proposal": cfg.proposal,
        "proposal_scale": cfg.proposal_scale,
        "burn_in": cfg.burn_in,
        "thinning": cfg.thinning,
        "chains": chains,
        "chain_sizes": sizes,
        "seed": params.seed,
        "accepted": int(accepted),
        "proposed": int(proposed),
    }
    return SampleBatch(reduce_angles(angles), params, provenance)


def integrated_autocorrelation_time(series, c: float = 5.0) -> float:
    """Sokal-windowed integrated autocorrelation time (``>= 0.5``)."""
    y = np.asarray(series, dtype=float)
    y = y - y.mean()
    m = y.size
    var = np.dot(y, y) / m
    if m < 2 or var == 0:
        return 0.5
    f = np.fft.rfft(y, n=2 * m)
    acf = np.fft.irfft(f * np.conj(f))[:m] / (var * m)
    tau = 0.5
    for lag in range(1, m):
        tau += acf[lag]
        if lag >= c * tau:
            break
    return max(tau, 0.5)


def mcmc_diagnostics(batch: SampleBatch) -> dict[str, Any]:
    """Acceptance rate and autocorrelation time of Re p_1 along each chain."""
    prov = batch.provenance
    if prov.get("sampler") != "metropolis":
        raise ValueError("diagnostics need a batch produced by mcmc_sample")
    rate = prov["accepted"] / prov["proposed"] if prov["proposed"] else 1.0
    p1 = np.exp(1j * batch.angles).sum(axis=1).real
    taus = []
    start = 0
    for size in prov["chain_sizes"]:
        taus.append(integrated_autocorrelation_time(p1[start:start + size]))
        start += size
    return {
        "acceptance_rate": float(rate),
        "tau_int_p1": float(max(taus)),
        "m": batch.m,
        "reliable": bool(min(prov["chain_sizes"]) >= 50),
    }


# -- exact sampler via Verblunsky coefficients -------------------------------

def sample_verblunsky(n: int, beta: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Independent coefficients with ``|a_k|^2 ~ Beta(1, beta (n-k-1)/2)``, uniform phases.

    The last coefficient is unimodular, which makes the CMV matrix unitary.
    """
    alpha = np.empty((size, n), dtype=complex)
    if n > 1:
        shape = 0.5 * beta * (n - 1 - np.arange(n - 1))
        r = np.sqrt(rng.beta(1.0, shape, size=(size, n - 1)))
        alpha[:, :-1] = r * np.exp(1j * rng.uniform(0.0, TWO_PI, (size, n - 1)))
    alpha[:, -1] = np.exp(1j * rng.uniform(0.0, TWO_PI, size))
    return alpha


def cmv_matrix(alpha) -> np.ndarray:
    """Dense CMV matrix ``L M`` of one coefficient vector (test oracle only)."""
    alpha = np.asarray(alpha, dtype=complex)
    n = alpha.size
    L = np.zeros((n, n), dtype=complex)
    M = np.zeros((n, n), dtype=complex)
    M[0, 0] = 1.0

    def put(mat, k):
        a = alpha[k]
        if k == n - 1:
            mat[k, k] = np.conj(a)
            return
        rho = math.sqrt(max(0.0, 1.0 - abs(a) ** 2))
        mat[k:k + 2, k:k + 2] = [[np.conj(a), rho], [rho, -a]]

    for k in range(n):
        put(L if k % 2 == 0 else M, k)
    return L @ M


@njit(cache=True)
def _pruefer(theta, alpha):
    """Continuous phase of the degree-n Blaschke product and its derivative."""
    n = alpha.shape[0]
    z = complex(math.cos(theta), math.sin(theta))
    w = z
    psi = theta
    dpsi = 1.0
    for k in range(n - 1):
        u = alpha[k] * w
        q = 1.0 - u
        qq = q.real * q.real + q.imag * q.imag
        g = (1.0 - (u.real * u.real + u.imag * u.imag)) / qq
        psi = psi + theta - 2.0 * math.atan2(q.imag, q.real)
        dpsi = 1.0 + dpsi * g
        qc = q.conjugate()
        w = z * w * (qc * qc) / qq
        # first-order renormalization onto the unit circle
        w = w * (1.5 - 0.5 * (w.real * w.real + w.imag * w.imag))
    return psi, dpsi


@njit(cache=True)
def _eigenangles(alpha, out):
    n = alpha.shape[0]
    two_pi = 2.0 * math.pi
    last = alpha[n - 1]
    gamma = -math.atan2(last.imag, last.real)
    psi0, _ = _pruefer(0.0, alpha)
    c0 = gamma + two_pi * math.ceil((psi0 - gamma) / two_pi)
    lo_prev = 0.0
    for m in range(n):
        c = c0 + two_pi * m
        lo = lo_prev
        hi = two_pi
        f_lo, d_lo = _pruefer(lo, alpha)
        f_lo -= c
        if f_lo >= 0.0:
            out[m] = lo
            continue
        theta = lo - f_lo / d_lo
        for _ in range(200):
            if not (lo < theta < hi):
                theta = 0.5 * (lo + hi)
            f, d = _pruefer(theta, alpha)
            f -= c
            if f < 0.0:
                lo = theta
            else:
                hi = theta
            step = f / d
            new = theta - step
            # |f| is limited by ~1e-12 rounding in the accumulated phase
            if abs(step) < 1e-13 or abs(f) < 1e-10 or hi - lo < 1e-14:
                theta = new if lo <= new <= hi else theta
                break
            theta = new
        out[m] = theta
        lo_prev = theta
    return out


@njit(cache=True)
def _eigenangles_batch(alpha):
    size, n = alpha.shape
    out = np.empty((size, n))
    for b in range(size):
        _eigenangles(alpha[b], out[b])
    return out


def cmv_eigenangles(alpha) -> np.ndarray:
    """Eigenangles (sorted, in ``[0, 2*pi)``) of the CMV matrices of ``alpha`` rows."""
    alpha = np.atleast_2d(np.asarray(alpha, dtype=complex))
    return reduce_angles(_eigenangles_batch(alpha))


def _verblunsky_chunk(task):
    params, size, chunk = task
    rng = stream(params.seed, 2, chunk)
    return cmv_eigenangles(sample_verblunsky(params.n, params.beta, size, rng))


def verblunsky_sample(params: EnsembleParams, m: int, workers: int | None = None) -> SampleBatch:
    """``m`` exact, independent CbetaE configurations."""
    if m < 1:
        raise ValueError("m must be >= 1")
    sizes = chunk_sizes(m, CHUNK)
    parts = parallel_map(_verblunsky_chunk, [(params, s, c) for c, s in enumerate(sizes)], workers)
    provenance = {"sampler": "verblunsky", "seed": params.seed, "chunk": CHUNK}
    return SampleBatch(np.concatenate(parts), params, provenance)


def sample(params: EnsembleParams, m: int, method: str = "exact", cfg: McmcConfig | None = None,
           workers: int | None = None) -> SampleBatch:
    if method == "exact":
        return verblunsky_sample(params, m, workers)
    if method == "mcmc":
        return mcmc_sample(params, m, cfg, workers)
    raise ValueError(f"unknown sampling method {method!r}")


# -- power sums straight from the CMV factors --------------------------------

@njit(cache=True)
def _apply_blocks(alpha, v, lo, hi, parity):
    """Apply the 2x2 blocks Theta_k with ``k % 2 == parity`` to ``v`` on [lo, hi]."""
    n = alpha.shape[0]
    # first block touching lo; for M (parity 1) index 0 is an identity block
    k = lo - ((lo - parity) % 2)
    if k < 0:
        k += 2
    while k <= hi:
        a = alpha[k]
        if k == n - 1:
            v[k] = a.conjugate() * v[k]
        else:
            rho = math.sqrt(max(0.0, 1.0 - (a.real * a.real + a.imag * a.imag)))
            x = v[k]
            y = v[k + 1]
            v[k] = a.conjugate() * x + rho * y
            v[k + 1] = rho * x - a * y
        k += 2


@njit(cache=True)
def _cmv_power_sums(alpha, kmax):
    size, n = alpha.shape
    out = np.zeros((size, kmax), dtype=np.complex128)
    v = np.zeros(n, dtype=np.complex128)
    for b in range(size):
        al = alpha[b]
        for i in range(n):
            v[:] = 0.0
            v[i] = 1.0
            lo = i
            hi = i
            for s in range(kmax):
                # C v = L (M v); each factor widens the support by at most one
                lo = max(lo - 1, 0)
                hi = min(hi + 1, n - 1)
                _apply_blocks(al, v, lo, hi, 1)
                lo = max(lo - 1, 0)
                hi = min(hi + 1, n - 1)
                _apply_blocks(al, v, lo, hi, 0)
                out[b, s] += v[i]
    return out


def cmv_power_sums(alpha, kmax: int) -> np.ndarray:
    """``tr(C^k)`` for ``k = 1..kmax`` without diagonalizing ``C``."""
    alpha = np.atleast_2d(np.asarray(alpha, dtype=complex))
    return _cmv_power_sums(alpha, int(kmax))


@dataclass
class PowerSumBatch:
    """Exact samples of ``(p_1, ..., p_kmax)`` for when angles are not needed."""

    values: np.ndarray
    params: EnsembleParams
    provenance: dict[str, Any] = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def kmax(self) -> int:
        return self.values.shape[1]

    def power_sums(self, kmax: int) -> np.ndarray:
        if kmax > self.kmax:
            raise ValueError(f"batch holds p_1..p_{self.kmax}, asked for {kmax}")
        return self.values[:, :kmax]


def _power_sum_chunk(task):
    params, size, chunk, kmax = task
    rng = stream(params.seed, 3, chunk)
    return cmv_power_sums(sample_verblunsky(params.n, params.beta, size, rng), kmax)


def verblunsky_power_sums(params: EnsembleParams, m: int, kmax: int,
                          workers: int | None = None) -> PowerSumBatch:
    if m < 1 or kmax < 1:
        raise ValueError("m and kmax must be >= 1")
    sizes = chunk_sizes(m, CHUNK)
    parts = parallel_map(_power_sum_chunk, [(params, s, c, kmax) for c, s in enumerate(sizes)], workers)
    provenance = {"sampler": "verblunsky-trace", "seed": params.seed, "chunk": CHUNK}
    return PowerSumBatch(np.concatenate(parts), params, provenance)


def exact_power_sums(params: EnsembleParams, m: int, kmax: int,
                     workers: int | None = None) -> PowerSumBatch:
    """Exact power-sum samples by the cheaper route.

    The trace route costs about ``n kmax^2`` per sample, the eigenangle route
    about ``20 n^2``; the switch sits at ``kmax^2 = 16 n``.
    """
    if kmax * kmax <= 16 * params.n:
        return verblunsky_power_sums(params, m, kmax, workers)
    batch = verblunsky_sample(params, m, workers)
    return PowerSumBatch(batch.power_sums(kmax), params, dict(batch.provenance))
