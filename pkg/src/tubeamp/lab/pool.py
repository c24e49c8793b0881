"""Ordered parallel map for ensemble members."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def worker_count(requested: int | None = None) -> int:
    cap = os.environ.get("TUBEAMP_THREADS")
    n = requested or os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def ordered_map(fn, items, workers: int | None = None) -> list:
    """``[fn(i) for i in items]`` on a process pool, results in input order.

    Each call must be self-contained: no shared mutable state crosses the
    pool and every member derives its own RNG stream from its arguments.
    """
    items = list(items)
    n = min(worker_count(workers), len(items)) if items else 1
    if n <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))
