import asyncio
import logging
import time

import pytest

from dyadic_flow_tents.asynchronous.processor import CheckJob, CheckProcessor, CheckResult
from dyadic_flow_tents.asynchronous.validator import DepthValidator
from dyadic_flow_tents.domain_model import DomainSpec
from dyadic_flow_tents.exceptions import ConfigurationError, IntegrationError
from dyadic_flow_tents.suite_manager import (
    WORKERS_VARIABLE,
    SuiteConfig,
    SuiteManager,
    suite_exit_code,
    workers_from_env,
)
from dyadic_flow_tents.suites import CheckOutcome

logger = logging.getLogger(__name__)

BALL = DomainSpec(kind="ball", n=2, nbhd_width=0.3)


def passing(delay=0.0):
    time.sleep(delay)
    return CheckOutcome("passing", True, [{"value": 1}])


def failing():
    return CheckOutcome("failing", False, [])


def diverging():
    raise IntegrationError("step size collapsed")


def job(name, run, **params):
    return CheckJob(name=name, run=run, params=params, domain=BALL)


async def test_suite_manager_runs_every_job():
    consumed = []

    def my_consume_callback(result):
        logger.info(f"Callback got result: {result.name}")
        consumed.append(result.name)

    manager = SuiteManager(SuiteConfig(workers=3), consume_callback=my_consume_callback)
    jobs = [job("slow", passing, delay=0.05), job("fail", failing), job("fast", passing)]
    results = await manager.run(jobs)

    # results come back in submission order whatever the finishing order
    assert [r.name for r in results] == ["slow", "fail", "fast"]
    assert [r.status for r in results] == ["pass", "fail", "pass"]
    assert sorted(consumed) == ["fail", "fast", "slow"]
    assert suite_exit_code(results) == 1
    assert results[0].outcome.rows == [{"value": 1}]
    assert results[0].elapsed >= 0.05


async def test_async_callback():
    consumed = []

    async def my_consume_callback(result):
        await asyncio.sleep(0)
        consumed.append(result)

    manager = SuiteManager(SuiteConfig(workers=1), consume_callback=my_consume_callback)
    results = await manager.run([job("one", lambda: True), job("two", lambda: False)])
    assert len(consumed) == 2
    assert [r.status for r in results] == ["pass", "fail"]


async def test_refused_and_errored_jobs():
    manager = SuiteManager(SuiteConfig(workers=2), validator=DepthValidator(depth_min=3))
    results = await manager.run([job("shallow", passing, depth=2), job("diverging", diverging)])
    refused, errored = results
    assert refused.status == "refused"
    assert refused.exit_code == 2
    assert "less than minimum" in refused.info["error"]
    assert errored.status == "error"
    assert errored.info["error_type"] == "IntegrationError"
    assert errored.exit_code == 3
    assert suite_exit_code(results) == 3


async def test_configuration_errors_keep_their_condition():
    def refuse():
        raise ConfigurationError("condition (a) fails", "(a)")

    results = await SuiteManager(SuiteConfig(workers=1)).run([job("grid", refuse)])
    assert results[0].status == "error"
    assert results[0].info["condition"] == "(a)"
    assert results[0].exit_code == 2


async def test_processor_counts_checks():
    job_queue: asyncio.Queue = asyncio.Queue()
    buffer: asyncio.Queue = asyncio.Queue()
    processor = CheckProcessor(job_queue, buffer)
    before = CheckProcessor.checks_run.labels(check="counted", status="pass")._value.get()
    await job_queue.put(job("counted", passing))
    task = asyncio.create_task(processor.process_jobs())
    try:
        await job_queue.join()
        result = await buffer.get()
        assert result.status == "pass"
    finally:
        task.cancel()
        try:
            await task
        except asyncio.CancelledError:
            pass
    after = CheckProcessor.checks_run.labels(check="counted", status="pass")._value.get()
    assert after == before + 1


def test_run_sync():
    results = SuiteManager(SuiteConfig(workers=1)).run_sync([job("sync", passing)])
    assert results[0].status == "pass"


def test_workers_from_env(monkeypatch):
    monkeypatch.delenv(WORKERS_VARIABLE, raising=False)
    assert workers_from_env() == 1
    monkeypatch.setenv(WORKERS_VARIABLE, "4")
    assert workers_from_env() == 4
    assert SuiteConfig().workers == 4
    for bad in ("many", "0"):
        monkeypatch.setenv(WORKERS_VARIABLE, bad)
        with pytest.raises(ConfigurationError):
            workers_from_env()


def test_exit_code_of_an_empty_suite():
    assert suite_exit_code([]) == 0
    assert suite_exit_code([CheckResult("x", "refused")]) == 2
