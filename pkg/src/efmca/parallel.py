"""Deterministic data-parallel helpers.

Work is always split into chunks of a fixed size, independent of the
number of workers, and partial results are combined in chunk order.  The
worker count therefore changes wall time but never the numbers.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

DEFAULT_CHUNK = 512


def resolve_workers(workers=None):
    """Explicit ``workers`` wins, then ``EFMCA_WORKERS``, then 1."""
    if workers is None:
        env = os.environ.get("EFMCA_WORKERS", "").strip()
        workers = int(env) if env else 1
    workers = int(workers)
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    return workers


def chunk_slices(n, size=DEFAULT_CHUNK):
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def map_ordered(fn, items, workers=1):
    """``[fn(x) for x in items]``, optionally on a thread pool; order is preserved."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
