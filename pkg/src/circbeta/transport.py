"""Empirical Wasserstein-1 distances between point clouds in ``R^{2d}``."""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .ensemble import EnsembleParams, verblunsky_power_sums
from .rng import stream
from .statistics import GaussianTarget, sample_gaussian_target

EXACT_CAP = 2000
SLICED_DIRECTIONS = 128


@dataclass
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points)
        if np.iscomplexobj(pts):
            pts = complex_to_real(pts)
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if pts.shape[0] < 1:
            raise ValueError("empty point cloud")
        self.points = pts

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def complex_to_real(z) -> np.ndarray:
    """Flatten complex ``d``-vectors to real ``2d``-vectors ``(re_1, im_1, ..., re_d, im_d)``."""
    z = np.asarray(z, dtype=complex)
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],))
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def _check(a: PointCloud, b: PointCloud) -> None:
    if a.dim != b.dim:
        raise ValueError("point clouds live in different dimensions")


def exact_w1(a: PointCloud, b: PointCloud, cap: int = EXACT_CAP) -> float:
    """Mean matched distance of the optimal perfect matching."""
    _check(a, b)
    if a.m != b.m:
        raise ValueError("exact W1 needs equal cloud sizes")
    if a.m > cap:
        raise ValueError(f"m={a.m} exceeds the exact-solver cap {cap}")
    cost = cdist(a.points, b.points)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def brute_force_w1(a: PointCloud, b: PointCloud) -> float:
    """Minimum over all permutations; only for tiny clouds."""
    _check(a, b)
    if a.m != b.m or a.m > 8:
        raise ValueError("brute force needs equal sizes m <= 8")
    cost = cdist(a.points, b.points)
    idx = np.arange(a.m)
    return float(min(cost[idx, list(p)].mean() for p in itertools.permutations(range(a.m))))


def sliced_w1(a: PointCloud, b: PointCloud, directions: int = SLICED_DIRECTIONS, seed: int = 0) -> float:
    """Average over random unit directions of the 1-d W1 between projections."""
    _check(a, b)
    rng = stream(seed, 40)
    u = rng.standard_normal((directions, a.dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    pa, pb = a.points @ u.T, b.points @ u.T
    if a.m == b.m:
        return float(np.mean(np.abs(np.sort(pa, axis=0) - np.sort(pb, axis=0))))
    # unequal sizes: integrate the difference of quantile functions
    levels = np.union1d(np.arange(1, a.m + 1) / a.m, np.arange(1, b.m + 1) / b.m)
    widths = np.diff(np.concatenate([[0.0], levels]))
    qa = np.sort(pa, axis=0)[np.minimum(np.ceil(levels * a.m - 1e-12).astype(int) - 1, a.m - 1)]
    qb = np.sort(pb, axis=0)[np.minimum(np.ceil(levels * b.m - 1e-12).astype(int) - 1, b.m - 1)]
    return float(np.mean(widths @ np.abs(qa - qb)))


def empirical_w1(a: PointCloud, b: PointCloud, method: str = "exact", **kwargs) -> float:
    if method == "exact":
        return exact_w1(a, b, **kwargs)
    if method == "sliced":
        return sliced_w1(a, b, **kwargs)
    raise ValueError(f"unknown method {method!r}")


def subsample_w1(a: PointCloud, b: PointCloud, parts: int = 10, method: str = "exact") -> tuple[float, float]:
    """Full-sample W1 and a standard error from ``parts`` disjoint subsamples.

    The spread of the subsample values is rescaled by ``sqrt(1/parts)``:
    each subsample holds ``m/parts`` points, and the error of a W1 estimate
    is treated as shrinking like ``m^(-1/2)``.
    """
    w = empirical_w1(a, b, method)
    size = a.m // parts
    if size < 2:
        return w, math.nan
    vals = [empirical_w1(PointCloud(a.points[i * size:(i + 1) * size]),
                         PointCloud(b.points[i * size:(i + 1) * size]), method) for i in range(parts)]
    return w, float(np.std(vals, ddof=1) * math.sqrt(1.0 / parts))


def w1_convergence_experiment(beta: float, d: int, n_grid, m: int = 1000, seed: int = 0,
                              method: str = "exact", parts: int = 10, workers: int | None = None) -> dict:
    """``W1(T_d, G_d)`` over an ``n`` grid, with the same-law floor of two ``G_d`` batches."""
    if method == "exact" and m > EXACT_CAP:
        raise ValueError(f"m={m} exceeds the exact-solver cap {EXACT_CAP}")
    target = GaussianTarget(d, beta)
    floor, floor_se = subsample_w1(PointCloud(sample_gaussian_target(target, m, stream(seed, 41))),
                                   PointCloud(sample_gaussian_target(target, m, stream(seed, 42))),
                                   parts, method)
    rows = []
    for n in sorted(n_grid):
        t = verblunsky_power_sums(EnsembleParams(n, beta, seed), m, d, workers).values
        g = sample_gaussian_target(target, m, stream(seed, 43, n))
        w, se = subsample_w1(PointCloud(t), PointCloud(g), parts, method)
        rows.append({"n": n, "d": d, "beta": beta, "w1": w, "se": se, "floor": floor,
                     "floor_se": floor_se, "method": method})
    return {"beta": beta, "d": d, "m": m, "seed": seed, "floor": floor, "floor_se": floor_se, "rows": rows}


def w1_trend_check(report: dict, k: float = 2.0) -> dict:
    """Nonincreasing within ``k`` combined SE and, at the largest ``n``, within ``k`` SE of the floor."""
    rows = report["rows"]
    steps = []
    for a, b in zip(rows[:-1], rows[1:]):
        tol = k * math.hypot(a["se"], b["se"])
        steps.append(b["w1"] - a["w1"] <= tol)
    last = rows[-1]
    near_floor = last["w1"] - report["floor"] <= k * math.hypot(last["se"], report["floor_se"])
    return {"nonincreasing": bool(all(steps)), "near_floor": bool(near_floor),
            "passed": bool(all(steps) and near_floor)}


def write_w1_table(report: dict, path: str | Path) -> Path:
    path = Path(path)
    cols = ["n", "d", "beta", "w1", "se", "floor", "method"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in report["rows"]:
            w.writerow(r)
    return path
