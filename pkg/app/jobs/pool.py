from __future__ import annotations

import logging
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import TypeVar

from app.config import Config

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def clamp_jobs(jobs: int | None, max_jobs: int | None = None) -> int:
    max_jobs = int(max_jobs or Config.ANCILLA_MAX_JOBS)
    jobs = int(jobs or Config.ANCILLA_JOBS)
    return max(1, min(jobs, max_jobs))


def run_ordered(fn: Callable[[T], R], items: Iterable[T], jobs: int | None = 1) -> list[R]:
    """Map fn over items on a thread pool; results come back in input order."""
    items = list(items)
    workers = min(clamp_jobs(jobs), max(len(items), 1))
    if workers == 1:
        return [fn(item) for item in items]

    results: list[R | None] = [None] * len(items)
    first_error: BaseException | None = None
    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(fn, item): index for index, item in enumerate(items)}
        for future in as_completed(futures):
            index = futures[future]
            try:
                results[index] = future.result()
            except Exception as exc:
                log.error("Work item %d (%r) failed: %s", index, items[index], exc)
                if first_error is None:
                    first_error = exc
    if first_error is not None:
        raise first_error
    return results
