"""Worker-pool helper honoring the EMGRID_THREADS cap.

Results are collected in submission order, so outputs are identical for
any worker count; tasks must be independent pure computations.
"""

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count() -> int:
    raw = os.environ.get("EMGRID_THREADS", "").strip()
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"EMGRID_THREADS must be an integer, got {raw!r}")
        if n < 1:
            raise ValueError("EMGRID_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def parallel_map(fn, items):
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
