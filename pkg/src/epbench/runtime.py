"""Process-level runtime knobs.

EPBENCH_THREADS is the only ambient configuration: it caps the worker count
used for embarrassingly parallel per-example loops (black-box attacks,
corruption sweeps). Results are bitwise independent of the thread count
because every example owns an independently seeded generator.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

ENV_VAR = "EPBENCH_THREADS"


def worker_count() -> int:
    raw = os.environ.get(ENV_VAR, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{ENV_VAR} must be an integer, got {raw!r}") from exc
    return max(1, n)


def map_workers(fn, items):
    """Map fn over items, in order, on worker_count() threads."""
    n = worker_count()
    if n == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
