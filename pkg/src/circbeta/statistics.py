"""Power sums, the Gaussian comparison vector and moment bounds.

``p_k(x) = sum_j exp(i k x_j)``; ``T_d = (p_1, ..., p_d)`` is compared with
``G_d`` whose k-th entry is ``sqrt(2k/beta) Z_k`` for i.i.d. standard complex
Gaussians ``Z_k`` (``E|Z|^2 = 1``, ``E Z^2 = 0``).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


def power_sum(x, k: int) -> complex | np.ndarray:
    """``p_k`` of one configuration or of each row of a stack."""
    x = np.asarray(x, dtype=float)
    if k == 0:
        out = np.full(x.shape[:-1], float(x.shape[-1]), dtype=complex)
    else:
        out = np.exp(1j * k * x).sum(axis=-1)
    return complex(out) if out.ndim == 0 else out


def power_sums(x, d: int) -> np.ndarray:
    """``(p_1, ..., p_d)`` along a new last axis, by iterated multiplication."""
    x = np.asarray(x, dtype=float)
    z = np.exp(1j * x)
    out = np.empty(x.shape[:-1] + (d,), dtype=complex)
    zk = z.copy()
    for k in range(d):
        out[..., k] = zk.sum(axis=-1)
        zk *= z
    return out


def signed_power_sums(p: np.ndarray, n: int, k) -> np.ndarray:
    """Look up ``p_k`` for arbitrary integer ``k`` from a table of ``p_1..p_K``.

    ``p`` has shape ``(..., K)``; ``k`` may be an int or an integer array.
    """
    k = np.asarray(k)
    kabs = np.abs(k)
    if np.any(kabs > p.shape[-1]):
        raise ValueError(f"need p_{int(kabs.max())}, table holds {p.shape[-1]}")
    padded = np.concatenate([np.full(p.shape[:-1] + (1,), float(n), dtype=complex), p], axis=-1)
    vals = padded[..., kabs]
    return np.where(k < 0, np.conj(vals), vals)


@dataclass
class PowerSumVector:
    values: np.ndarray
    n: int

    @property
    def d(self) -> int:
        return self.values.shape[-1]


def power_sum_vector(x, d: int) -> PowerSumVector:
    if d < 1:
        raise ValueError("d must be >= 1")
    x = np.asarray(x, dtype=float)
    return PowerSumVector(power_sums(x, d), x.shape[-1])


def batch_power_sums(batch, kmax: int) -> np.ndarray:
    """``(m, kmax)`` table of power sums for a SampleBatch or PowerSumBatch."""
    return batch.power_sums(kmax)


# -- Gaussian target -----------------------------------------------------------

@dataclass(frozen=True)
class GaussianTarget:
    d: int
    beta: float

    def __post_init__(self):
        if self.d < 1 or not self.beta > 0:
            raise ValueError("need d >= 1 and beta > 0")

    @property
    def variances(self) -> np.ndarray:
        return (2.0 / self.beta) * np.arange(1, self.d + 1)


def standard_complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


def sample_gaussian_target(target: GaussianTarget, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` draws of ``G_d`` as an ``(m, d)`` complex array."""
    if m < 1:
        raise ValueError("m must be >= 1")
    return np.sqrt(target.variances) * standard_complex_normal(rng, (m, target.d))


# -- power-sum moment bounds ---------------------------------------------------

def jm_constants(m: int, n: int, beta: float) -> tuple[float, float]:
    """The factors ``A`` and ``B`` (evaluated in log space)."""
    if not 0 <= m <= n:
        raise ValueError(f"bounds hold for 0 <= m <= n, got m={m}, n={n}")
    c = abs(2.0 / beta - 1.0) / (n - m + 2.0 / beta)
    A = math.exp(m * math.log1p(-c)) if beta <= 2 else 1.0
    B = math.exp(m * math.log1p(c)) if beta > 2 else 1.0
    return A, B


def jm_second_moment_bound(m: int, n: int, beta: float) -> tuple[float, float, float]:
    """``(A, B, B * (2/beta) * m)``, the bound on ``E|p_m|^2``."""
    A, B = jm_constants(m, n, beta)
    return A, B, B * (2.0 / beta) * m


def jm_fourth_moment_bound(j: int, k: int, m: int, n: int, beta: float) -> float:
    """Bound on ``|E(p_j p_{m-j} p_{-k} p_{k-m})|``.

    ``k = m - j`` names the same random variable as ``k = j`` (the pair
    ``{k, m-k}`` equals ``{j, m-j}``), so it takes the diagonal bound.
    """
    if not (0 <= j <= m and 0 <= k <= m and m <= n):
        raise ValueError(f"need 0 <= j, k <= m <= n, got j={j}, k={k}, m={m}, n={n}")
    A, B = jm_constants(m, n, beta)
    s = (2.0 / beta) ** 2
    if k == j or k == m - j:
        return B * s * 2.0 * j * (m - j)
    return max(abs(A - 1.0), abs(B - 1.0)) * s * 2.0 * math.sqrt(j * (m - j) * k * (m - k))


# -- Monte Carlo moment report -------------------------------------------------

@dataclass
class MomentReport:
    n: int
    beta: float
    d: int
    m_samples: int
    second: list[dict] = field(default_factory=list)
    fourth: list[dict] = field(default_factory=list)
    reliable: bool = True

    @property
    def passed(self) -> bool:
        return all(r["ok"] for r in self.second) and all(r["ok"] for r in self.fourth)

    def to_json(self) -> str:
        data = asdict(self)
        data["passed"] = self.passed
        return json.dumps(data, indent=2)

    def to_csv(self, path: str | Path) -> None:
        cols = ["kind", "m", "j", "k", "estimate_re", "estimate_im", "se", "bound", "ok"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in self.second:
                w.writerow({"kind": "second", "m": r["m"], "j": "", "k": "", "estimate_re": r["estimate"],
                            "estimate_im": 0.0, "se": r["se"], "bound": r["bound"], "ok": r["ok"]})
            for r in self.fourth:
                w.writerow({"kind": "fourth", "m": r["m"], "j": r["j"], "k": r["k"],
                            "estimate_re": r["estimate_re"], "estimate_im": r["estimate_im"],
                            "se": r["se"], "bound": r["bound"], "ok": r["ok"]})


def mean_and_se(samples, batches: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Mean over axis 0 and its standard error.

    Complex input gives ``sqrt(se_re^2 + se_im^2)``. With ``batches`` the
    error comes from batch means, for serially correlated (MCMC) input.
    """
    samples = np.asarray(samples)
    mean = samples.mean(axis=0)
    if batches:
        size = samples.shape[0] // batches
        if size < 1:
            raise ValueError("fewer samples than batches")
        samples = samples[: size * batches].reshape((batches, size) + samples.shape[1:]).mean(axis=1)
    m = samples.shape[0]
    if np.iscomplexobj(samples):
        var = samples.real.var(axis=0, ddof=1) + samples.imag.var(axis=0, ddof=1)
    else:
        var = samples.var(axis=0, ddof=1)
    return mean, np.sqrt(var / m)


def moment_report(batch, d: int, n: int | None = None, beta: float | None = None,
                  tolerance_se: float = 3.0) -> MomentReport:
    """Second and fourth power-sum moments against their finite-n bounds.

    Fourth moments ``E(p_j p_{m-j} p_{-k} p_{k-m})`` are checked for
    ``2 <= m <= d`` and ``1 <= j, k <= m-1``; at ``j`` or ``k`` in ``{0, m}``
    a factor ``p_0 = n`` enters and the stated bound does not apply.
    """
    n = batch.params.n if n is None else n
    beta = batch.params.beta if beta is None else beta
    if d > n:
        raise ValueError("bounds need m <= n")
    p = batch_power_sums(batch, d)
    size = p.shape[0]
    report = MomentReport(n=n, beta=beta, d=d, m_samples=size, reliable=size >= 500)
    # one batch-means error model shared by every moment when samples are correlated
    batches = 20 if batch.provenance.get("sampler") == "metropolis" else None
    abs2 = np.abs(p) ** 2
    mean, se = mean_and_se(abs2, batches)
    for m in range(1, d + 1):
        _, _, bound = jm_second_moment_bound(m, n, beta)
        est = float(mean[m - 1])
        report.second.append({"m": m, "estimate": est, "se": float(se[m - 1]), "bound": bound,
                              "ok": bool(est <= bound + tolerance_se * se[m - 1])})
    for m in range(2, d + 1):
        for j in range(1, m):
            for k in range(1, m):
                prod = p[:, j - 1] * p[:, m - j - 1] * np.conj(p[:, k - 1] * p[:, m - k - 1])
                est, err = mean_and_se(prod, batches)
                bound = jm_fourth_moment_bound(j, k, m, n, beta)
                report.fourth.append({"m": m, "j": j, "k": k, "estimate_re": float(est.real),
                                      "estimate_im": float(est.imag), "se": float(err), "bound": bound,
                                      "ok": bool(abs(est) <= bound + tolerance_se * err)})
    return report
