import threading

import pytest

from dfpt.utils.concurrency import gather_threads, raise_first, run_all


def _job(value, fail=False):
    def job():
        if fail:
            raise ValueError(f"job {value} failed")
        return value, threading.get_ident()

    return job


def test_run_all_keeps_submission_order():
    results = run_all([_job(i) for i in range(8)])
    assert [value for value, _ in results] == list(range(8))


def test_run_all_raises_first_failure():
    jobs = [_job(0), _job(1, fail=True), _job(2, fail=True)]
    with pytest.raises(ValueError, match="job 1"):
        run_all(jobs)


def test_run_all_returns_exceptions_in_place():
    results = run_all([_job(0), _job(1, fail=True)], return_exceptions=True)
    assert results[0][0] == 0
    assert isinstance(results[1], ValueError)
    assert run_all([]) == []


async def test_gather_threads_runs_off_the_loop():
    loop_thread = threading.get_ident()
    results = await gather_threads([_job(i) for i in range(4)])
    assert [value for value, _ in results] == [0, 1, 2, 3]
    assert all(thread != loop_thread for _, thread in results)


async def test_run_all_inside_a_loop_is_sequential():
    loop_thread = threading.get_ident()
    results = run_all([_job(i) for i in range(3)])
    assert [thread for _, thread in results] == [loop_thread] * 3


def test_raise_first():
    raise_first([1, 2])
    with pytest.raises(KeyError):
        raise_first([1, KeyError("a"), ValueError("b")])
