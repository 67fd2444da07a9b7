"""
Worker Pool
Bounded process pool for independent training runs and grid points, merged in input order
"""
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def default_jobs() -> int:
    return os.cpu_count() or 1


def _guarded(payload):
    fn, item = payload
    try:
        return fn(item)
    except Exception as e:  # surfaced to the caller in the result slot
        return e


def run_pool(
    fn: Callable[[T], R],
    items: Sequence[T],
    jobs: Optional[int] = 1,
    return_exceptions: bool = False,
) -> List[R]:
    """Map fn over items on up to `jobs` processes; results keep input order"""
    items = list(items)
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    payloads = [(fn, item) for item in items]
    worker = _guarded if return_exceptions else _call
    if jobs == 1 or len(items) <= 1:
        return [worker(p) for p in payloads]
    logger.debug("dispatching %d work items to %d workers", len(items), jobs)
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(worker, payloads))


def _call(payload):
    fn, item = payload
    return fn(item)
