"""Seeding and worker-pool helpers shared by all stages."""

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

WORKERS_ENV_VAR = "CLUSTERSFM_WORKERS"


def stable_seed(*parts) -> int:
    """Derive a 63-bit seed from arbitrary parts via sha256.

    Unlike Python's salted hash(), the result is stable across processes,
    so per-unit RNG streams never depend on worker scheduling.
    """
    digest = hashlib.sha256(repr(tuple(parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def seeded_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(stable_seed(*parts))


def default_worker_count() -> int:
    env = os.environ.get(WORKERS_ENV_VAR)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def parallel_map(fn, items, workers: int | None = None) -> list:
    """Apply fn to items on a bounded thread pool, results in input order.

    Work items must not share mutable state; with that contract the result
    is independent of the worker count.
    """
    items = list(items)
    if workers is None:
        workers = default_worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
