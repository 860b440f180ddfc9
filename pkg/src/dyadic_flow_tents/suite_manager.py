import asyncio
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
import os
from typing import Awaitable, Callable, List, Optional, Sequence, Union

from dyadic_flow_tents.asynchronous.processor import (
    CheckJob,
    CheckProcessor,
    CheckProcessorConfig,
    CheckResult,
)
from dyadic_flow_tents.exceptions import ConfigurationError

logger = logging.getLogger(__name__)

WORKERS_VARIABLE = "DYADIC_WORKERS"


def workers_from_env(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_VARIABLE)
    if raw is None or raw == "":
        return default
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigurationError(f"{WORKERS_VARIABLE}={raw!r} is not an integer", "workers") from None
    if workers < 1:
        raise ConfigurationError(f"{WORKERS_VARIABLE} must be at least 1, got {workers}", "workers")
    return workers


@dataclass
class SuiteConfig:
    """Worker count defaults to $DYADIC_WORKERS (1 = serial)."""

    workers: int = field(default_factory=workers_from_env)
    process_delay: float = 0.0


def suite_exit_code(results: Sequence[CheckResult]) -> int:
    """0 when every check passed, otherwise the most severe result code."""
    return max((r.exit_code for r in results), default=0)


class SuiteManager:
    """
    Encapsulates:
      - a job queue of CheckJob items
      - a user-supplied validator gating each job's preconditions
      - CheckProcessor workers that run jobs in a thread pool -> result queue
      - a consumer task for the result queue, which may call a user-supplied callback
    """

    def __init__(
        self,
        config: SuiteConfig,
        validator=None,
        consume_callback: Optional[Union[Callable, Awaitable]] = None,
    ):
        """
        :param config: worker count and processing delay.
        :param validator: an object with validate(job) -> (bool, dict), e.g. a CompositeValidator.
        :param consume_callback: optional callback invoked with every CheckResult. May be async.
        """
        self.config = config
        self.validator = validator
        self.consume_callback = consume_callback
        self.results: List[CheckResult] = []
        self._tasks: List[asyncio.Task] = []
        self._executor: Optional[ThreadPoolExecutor] = None

    async def _consume_results(self, result_queue: asyncio.Queue):
        """
        Continuously consume results from the result queue.
        If `consume_callback` is provided, each result is passed to it.
        """
        while True:
            result = await result_queue.get()
            try:
                logger.info(f"Consuming result: {result.name} -> {result.status}")
                self.results.append(result)
                if self.consume_callback:
                    if asyncio.iscoroutinefunction(self.consume_callback):
                        await self.consume_callback(result)
                    else:
                        self.consume_callback(result)
            except Exception as e:
                logger.exception("Error while consuming results: %s", e)
            finally:
                result_queue.task_done()

    async def run(self, jobs: Sequence[CheckJob]) -> List[CheckResult]:
        """Run every job and return the results in submission order."""
        job_queue: asyncio.Queue = asyncio.Queue()
        result_queue: asyncio.Queue = asyncio.Queue()
        self.results = []
        self._executor = ThreadPoolExecutor(max_workers=self.config.workers)
        processor = CheckProcessor.from_config(
            CheckProcessorConfig(
                job_queue=job_queue,
                buffer=result_queue,
                validator=self.validator,
                executor=self._executor,
                process_delay=self.config.process_delay,
            )
        )
        for order, job in enumerate(jobs):
            job.order = order
            job_queue.put_nowait(job)

        self._tasks = [asyncio.create_task(processor.process_jobs()) for _ in range(self.config.workers)]
        self._tasks.append(asyncio.create_task(self._consume_results(result_queue)))
        logger.info(f"Running {len(jobs)} checks with {self.config.workers} workers")
        try:
            await job_queue.join()
            await result_queue.join()
        finally:
            self.stop()
        return sorted(self.results, key=lambda r: r.order)

    def run_sync(self, jobs: Sequence[CheckJob]) -> List[CheckResult]:
        return asyncio.run(self.run(jobs))

    def stop(self):
        """Cancel the worker tasks and release the thread pool."""
        for t in self._tasks:
            t.cancel()
        self._tasks = []
        if self._executor is not None:
            self._executor.shutdown(wait=False)
            self._executor = None
        logger.debug("All suite tasks canceled.")
