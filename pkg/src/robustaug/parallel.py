"""Process-pool mapping with a fixed job layout.

Jobs are split by the caller into fixed-size chunks, so the worker count only
changes wall-clock time, never results.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

THREADS_ENV = "ROBUSTAUG_THREADS"


def worker_count(workers: int | None = None) -> int:
    if workers is None:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            workers = int(raw)
        except ValueError:
            workers = 1
    return max(1, workers)


def map_ordered(fn, jobs: list, workers: int | None = None) -> list:
    n = worker_count(workers)
    if n == 1 or len(jobs) < 2:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(n, len(jobs))) as pool:
        return list(pool.map(fn, jobs))
