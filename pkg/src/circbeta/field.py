"""Log-characteristic-polynomial fields and their Gaussian limits.

``log P_n(theta) = sum_j log(1 - exp(i(x_j - theta))) = -sum_{j>=1} p_j e^{-i j theta} / j``,
split into real part ``X_n`` and imaginary part ``Y_n``. Fields are held as
Fourier coefficients ``f_k`` for ``k = -J..J`` with
``f(theta) = sum_k f_k e^{i k theta}``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ensemble import EnsembleParams, exact_power_sums
from .rng import stream
from .statistics import mean_and_se, power_sums, standard_complex_normal


@dataclass
class FourierField:
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.shape[-1] % 2 != 1:
            raise ValueError("coefficients must be indexed -J..J")
        self.coeffs = c

    @property
    def J(self) -> int:
        return (self.coeffs.shape[-1] - 1) // 2

    @property
    def frequencies(self) -> np.ndarray:
        return np.arange(-self.J, self.J + 1)

    def coefficient(self, k: int):
        if abs(k) > self.J:
            return np.zeros(self.coeffs.shape[:-1], dtype=complex)
        return self.coeffs[..., k + self.J]

    def is_hermitian(self) -> bool:
        return bool(np.array_equal(self.coeffs, np.conj(self.coeffs[..., ::-1])))

    def evaluate(self, theta) -> np.ndarray:
        """``sum_k f_k e^{i k theta}`` on a grid (complex; real for Hermitian fields)."""
        theta = np.asarray(theta, dtype=float)
        basis = np.exp(1j * np.multiply.outer(theta, self.frequencies))
        return np.tensordot(self.coeffs, basis, axes=([-1], [-1]))

    def to_csv(self, path: str | Path) -> Path:
        if self.coeffs.ndim != 1:
            raise ValueError("one field per file")
        path = Path(path)
        np.savetxt(path, np.column_stack([self.frequencies, self.coeffs.real, self.coeffs.imag]),
                   delimiter=",", header="index,re,im", comments="", fmt=["%d", "%.17g", "%.17g"])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "FourierField":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 1] + 1j * data[:, 2])


def _from_negative(neg: np.ndarray, hermitian: bool) -> FourierField:
    """Build a field from its coefficients at frequencies ``-1..-J``."""
    J = neg.shape[-1]
    out = np.zeros(neg.shape[:-1] + (2 * J + 1,), dtype=complex)
    out[..., :J] = neg[..., ::-1]
    if hermitian:
        out[..., J + 1:] = np.conj(neg)
    return FourierField(out)


def log_char_poly_coeffs(x, J: int) -> FourierField:
    """One-sided expansion: coefficient ``-p_j/j`` at ``e^{-i j theta}``, zero at positive frequencies."""
    if J < 1:
        raise ValueError("J must be >= 1")
    p = power_sums(np.asarray(x, dtype=float), J)
    return _from_negative(-p / np.arange(1, J + 1), hermitian=False)


def xn_yn_fields(x, J: int) -> tuple[FourierField, FourierField]:
    """``X_n = Re log P_n`` and ``Y_n = Im log P_n``, truncated at ``J``."""
    if J < 1:
        raise ValueError("J must be >= 1")
    j = np.arange(1, J + 1)
    p = power_sums(np.asarray(x, dtype=float), J)
    return _from_negative(-p / (2 * j), True), _from_negative(-p / (2j * j), True)


def sample_limiting_field(J: int, beta: float, rng: np.random.Generator, size: int | None = None):
    """``sqrt(2/beta) (X, Y)`` truncated at ``J``, sharing one draw of ``Z_j``.

    ``X`` carries ``Z_j/(2 sqrt j)`` at ``e^{-i j theta}`` and ``Y`` carries
    ``-i Z_j/(2 sqrt j)``, each with its Hermitian mirror.
    """
    if J < 1:
        raise ValueError("J must be >= 1")
    shape = (J,) if size is None else (size, J)
    z = standard_complex_normal(rng, shape)
    c = math.sqrt(2.0 / beta) / (2.0 * np.sqrt(np.arange(1, J + 1)))
    return _from_negative(c * z, True), _from_negative(-1j * c * z, True)


def sobolev_norm_sq(field: FourierField, s: float) -> np.ndarray | float:
    """``sum_k (1 + k^2)^s |f_k|^2`` over the stored coefficients."""
    w = (1.0 + field.frequencies.astype(float) ** 2) ** s
    out = np.sum(w * np.abs(field.coeffs) ** 2, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def xn_norm_sq_from_sums(p: np.ndarray, s_prime: float) -> np.ndarray:
    """``||X_n||^2_{-s'}`` from power sums ``p_1..p_J`` (both mirror halves included)."""
    j = np.arange(1, p.shape[-1] + 1)
    return 0.5 * np.sum((1.0 + j**2) ** (-s_prime) * np.abs(p) ** 2 / j**2, axis=-1)


def closed_surrogate(n: int, s_prime: float, J: int) -> float:
    """``(1/2) sum_{j<=J} (1 + j^2)^{-s'} min(j, n) / j^2``, the CUE value of ``E||X_n||^2``."""
    j = np.arange(1, J + 1)
    return float(0.5 * np.sum((1.0 + j**2) ** (-s_prime) * np.minimum(j, n) / j**2))


def tightness_report(beta: float, s_prime: float, n_grid, m: int = 2000, J: int | None = None,
                     seed: int = 0, workers: int | None = None) -> dict:
    """``E||X_n||^2_{-s'}`` over an ``n`` grid against its surrogates.

    ``J`` defaults to ``n`` for each ``n``; it must not be smaller.
    """
    if not 0.5 < s_prime < 1:
        raise ValueError("need 1/2 < s' < 1")
    rows = []
    for n in sorted(n_grid):
        Jn = n if J is None else J
        if Jn < n:
            raise ValueError("tightness needs J >= n")
        p = exact_power_sums(EnsembleParams(n, beta, seed), m, Jn, workers).values
        norms = xn_norm_sq_from_sums(p, s_prime)
        est, se = mean_and_se(norms)
        j = np.arange(1, Jn + 1)
        moments = np.mean(np.abs(p) ** 2, axis=0)
        surrogate = float(0.5 * np.sum((1.0 + j**2) ** (-s_prime) * moments / j**2))
        row = {"n": n, "J": Jn, "m": m, "estimate": float(est), "se": float(se),
               "surrogate": surrogate}
        if beta == 2:
            closed = closed_surrogate(n, s_prime, Jn)
            row["closed"] = closed
            row["z_closed"] = float((est - closed) / se)
        rows.append(row)
    est = [r["estimate"] for r in rows]
    ses = [r["se"] for r in rows]
    increasing = all(b > a for a, b in zip(est[:-1], est[1:]))
    growth = est[-1] - est[0]
    unbounded = increasing and growth > 3 * math.hypot(ses[0], ses[-1])
    report = {"beta": beta, "s_prime": s_prime, "m": m, "seed": seed, "rows": rows,
              "bounded": bool(not unbounded), "reliable": m >= 500}
    if beta == 2:
        report["closed_within_4se"] = bool(all(abs(r["z_closed"]) <= 4 for r in rows))
    return report


def write_tightness(report: dict, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    js, cs = out_dir / "tightness.json", out_dir / "tightness.csv"
    js.write_text(json.dumps(report, indent=2))
    cols = ["n", "J", "m", "estimate", "se", "surrogate", "closed", "z_closed"]
    with open(cs, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in report["rows"]:
            w.writerow(r)
    return [js, cs]


# -- covariance comparison ------------------------------------------------------

def coefficient_features(fx: FourierField, fy: FourierField, K: int) -> np.ndarray:
    """Real features ``(Re, Im)`` of the ``e^{-i j theta}`` coefficients of X and Y for ``j = 1..K``."""
    cols = []
    for f in (fx, fy):
        for j in range(1, K + 1):
            c = f.coefficient(-j)
            cols += [c.real, c.imag]
    return np.stack(cols, axis=-1)


def covariance_with_se(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample covariance of the (mean-zero by symmetry) features, with entrywise SE.

    The means vanish by rotation invariance of both laws, so second moments
    are used directly; each entry is a sample mean of ``u_a u_b``.
    """
    prod = features[:, :, None] * features[:, None, :]
    return mean_and_se(prod)


def field_covariance_comparison(beta: float, n: int, K: int = 5, m: int = 4000, seed: int = 0,
                                threshold: float = 4.0, workers: int | None = None) -> dict:
    """Coefficient covariances of ``(X_n, Y_n)`` against those of the limiting pair."""
    p = exact_power_sums(EnsembleParams(n, beta, seed), m, K, workers).values
    j = np.arange(1, K + 1)
    fx, fy = _from_negative(-p / (2 * j), True), _from_negative(-p / (2j * j), True)
    emp, emp_se = covariance_with_se(coefficient_features(fx, fy, K))
    gx, gy = sample_limiting_field(K, beta, stream(seed, 50), size=m)
    lim, lim_se = covariance_with_se(coefficient_features(gx, gy, K))
    comb = np.sqrt(emp_se**2 + lim_se**2)
    z = np.divide(emp - lim, comb, out=np.zeros_like(emp), where=comb > 0)
    return {"beta": beta, "n": n, "K": K, "m": m, "seed": seed,
            "max_abs_z": float(np.max(np.abs(z))), "passed": bool(np.all(np.abs(z) <= threshold)),
            "empirical": emp.tolist(), "limit": lim.tolist(), "z": z.tolist()}
