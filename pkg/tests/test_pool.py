import threading

import pytest

from app.config import Config
from app.jobs.pool import clamp_jobs, run_ordered


def test_clamp_jobs_bounds():
    assert clamp_jobs(0) == Config.ANCILLA_JOBS
    assert clamp_jobs(-3, max_jobs=4) == 1
    assert clamp_jobs(64, max_jobs=4) == 4
    assert clamp_jobs(3, max_jobs=4) == 3


def test_run_ordered_returns_input_order():
    seen = set()
    lock = threading.Lock()

    def work(item):
        with lock:
            seen.add(threading.get_ident())
        return item * 10

    results = run_ordered(work, [5, 1, 4, 2, 3], jobs=3)

    assert results == [50, 10, 40, 20, 30]
    assert len(seen) >= 1


def test_run_ordered_reraises_failures():
    def work(item):
        if item == 2:
            raise RuntimeError("bad item")
        return item

    with pytest.raises(RuntimeError, match="bad item"):
        run_ordered(work, [1, 2, 3], jobs=2)
    with pytest.raises(RuntimeError, match="bad item"):
        run_ordered(work, [1, 2, 3], jobs=1)


def test_run_ordered_handles_empty_input():
    assert run_ordered(lambda item: item, [], jobs=4) == []
