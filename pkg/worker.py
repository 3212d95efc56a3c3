import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Iterable, Optional


def default_jobs() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except Exception:
        return max(1, os.cpu_count() or 1)


def _guarded(fn: Callable[[Any], Any], item: Any) -> tuple[bool, Any]:
    try:
        return True, fn(item)
    except Exception as exc:
        # exceptions cross the process boundary as values; keep the trace text
        exc.worker_traceback = traceback.format_exc()  # type: ignore[attr-defined]
        return False, exc


class TaskPool:
    """Runs independent tasks inline (jobs=1) or in a process pool.

    Results come back in submission order, so anything seeded per task stays
    reproducible regardless of the worker count. The first failed task is
    re-raised after every task has finished.
    """

    def __init__(self, jobs: Optional[int] = None):
        self.jobs = max(1, int(jobs)) if jobs else default_jobs()
        self._log = logging.getLogger(__name__)

    def map(self, fn: Callable[[Any], Any], items: Iterable[Any]) -> list[Any]:
        tasks = list(items)
        if not tasks:
            return []
        t0 = time.perf_counter()
        workers = min(self.jobs, len(tasks))
        self._log.info("Running %d task(s) on %d worker(s)", len(tasks), workers)
        if workers == 1:
            outcomes = [_guarded(fn, item) for item in tasks]
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_guarded, fn, item) for item in tasks]
                outcomes = [f.result() for f in futures]
        failed = [value for ok, value in outcomes if not ok]
        for exc in failed:
            self._log.error("Task failed: %s\n%s", exc, getattr(exc, "worker_traceback", ""))
        self._log.info("Finished %d task(s) in %.1f s (%d failed)", len(tasks), time.perf_counter() - t0, len(failed))
        if failed:
            raise failed[0]
        return [value for _, value in outcomes]
