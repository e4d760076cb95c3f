from typing import Any, Callable, Iterable, Optional

import numpy as np
from joblib import Parallel, delayed

from nodal_lab.config import get_settings
from nodal_lab.logger import logger


def run_ordered(
    func: Callable[[Any], Any],
    items: Iterable[Any],
    n_jobs: Optional[int] = None,
) -> list[Any]:
    """
    Runs func over items on a joblib worker pool. Results come back in item
    order regardless of which worker finished first, so every reduction
    over them is deterministic.
    """
    items = list(items)
    n_jobs = n_jobs or get_settings().n_jobs
    if n_jobs == 1 or len(items) <= 1:
        return [func(item) for item in items]
    logger.debug(f"Dispatching {len(items)} work items to {n_jobs} workers")
    return Parallel(n_jobs=n_jobs)(delayed(func)(item) for item in items)


def member_seeds(base_seed: int, n: int) -> np.ndarray:
    """Independent 64-bit seeds, one per ensemble member."""
    return np.random.SeedSequence(int(base_seed)).generate_state(n, dtype=np.uint64)


def pair_rng(seed: int, index: int) -> np.random.Generator:
    """Generator keyed by (seed, work item index)."""
    return np.random.default_rng([int(seed), int(index)])


def row_blocks(n: int, block: int) -> list[tuple[int, int]]:
    return [(start, min(n, start + block)) for start in range(0, n, block)]
