"""Run independent numerical jobs on worker threads, keeping submission order."""

import asyncio
import logging
from typing import Callable, Sequence

logger = logging.getLogger(__name__)


async def gather_threads[T](
    jobs: Sequence[Callable[[], T]],
) -> list[T | BaseException]:
    """Run each job with `asyncio.to_thread`; failures come back in place."""
    return await asyncio.gather(
        *(asyncio.to_thread(job) for job in jobs), return_exceptions=True
    )


def _run_sequential[T](jobs: Sequence[Callable[[], T]]) -> list[T | BaseException]:
    results: list[T | BaseException] = []
    for job in jobs:
        try:
            results.append(job())
        except Exception as e:
            results.append(e)
    return results


def run_all[T](
    jobs: Sequence[Callable[[], T]], *, return_exceptions: bool = False
) -> list[T | BaseException]:
    """
    Run `jobs` concurrently and return their results in submission order.

    numpy releases the GIL in the heavy kernels, so threads are enough. When
    called from inside a running event loop the jobs run sequentially
    instead; use `gather_threads` there to get concurrency.
    """
    if not jobs:
        return []
    try:
        asyncio.get_running_loop()
    except RuntimeError:
        results = asyncio.run(gather_threads(jobs))
    else:
        results = _run_sequential(jobs)

    if not return_exceptions:
        raise_first(results)
    return results


def raise_first(results: Sequence[object]):
    failures = [r for r in results if isinstance(r, BaseException)]
    if failures:
        if len(failures) > 1:
            logger.warning(
                f"{len(failures)} of {len(results)} jobs failed, raising the first"
            )
        raise failures[0]
