"""Seeded random streams and a deterministic worker pool.

Every stochastic task derives its own generator from ``(seed, *key)`` so the
outcome never depends on how tasks are scheduled across workers.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")

WORKERS_ENV = "CIRCBETA_WORKERS"


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the task identified by ``key``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def default_workers() -> int:
    value = os.environ.get(WORKERS_ENV)
    if not value:
        return 1
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def parallel_map(fn: Callable[[T], R], tasks: Iterable[T], workers: int | None = None) -> list[R]:
    """Ordered map; results are identical for any worker count."""
    tasks = list(tasks)
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def chunk_sizes(total: int, chunk: int) -> Sequence[int]:
    full, rest = divmod(total, chunk)
    return [chunk] * full + ([rest] if rest else [])
