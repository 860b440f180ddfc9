# check_processor.py
import asyncio
from concurrent.futures import Executor
from dataclasses import dataclass, field
import logging
import time
from typing import Any, Callable, Dict, Optional

from prometheus_client import Counter

from dyadic_flow_tents.domain_model import DomainSpec
from dyadic_flow_tents.exceptions import DyadicError

logger = logging.getLogger(__name__)

STATUSES = ("pass", "fail", "refused", "error")


@dataclass
class CheckJob:
    """One verification suite: ``run(**params)`` returns an outcome with a ``passed`` flag."""

    name: str
    run: Callable[..., Any]
    params: Dict[str, Any] = field(default_factory=dict)
    domain: Optional[DomainSpec] = None
    order: int = 0

    def execute(self) -> Any:
        return self.run(**self.params)


@dataclass
class CheckResult:
    name: str
    status: str
    order: int = 0
    outcome: Any = None
    info: Dict[str, Any] = field(default_factory=dict)
    elapsed: float = 0.0

    @property
    def exit_code(self) -> int:
        if self.status == "pass":
            return 0
        if self.status == "fail":
            return 1
        return int(self.info.get("exit_code", 2 if self.status == "refused" else 3))


@dataclass
class CheckProcessorConfig:
    job_queue: asyncio.Queue
    buffer: Optional[asyncio.Queue] = None
    validator: Optional[Any] = None
    executor: Optional[Executor] = None
    process_delay: Optional[float] = 0


def _passed(outcome: Any) -> bool:
    if isinstance(outcome, bool):
        return outcome
    return bool(getattr(outcome, "passed", True))


class CheckProcessor:

    checks_run = Counter(
        "dyadic_checks_run",
        "Number of checks run by the check processor",
        ["check", "status"],
    )

    def __init__(
        self,
        job_queue: asyncio.Queue,
        buffer: asyncio.Queue = None,
        validator=None,
        executor: Executor = None,
        process_delay: float = 0,
    ):
        """
        Args:
            job_queue (asyncio.Queue): Queue from which check jobs are read.
            buffer: Target buffer where results are put.
            validator: An object with a synchronous validate(job) method returning (bool, dict).
            executor: Executor the numerical work runs in; the loop's default when None.
            process_delay (float): Optional delay (in seconds) before running a job.
        """
        self.job_queue = job_queue
        self.buffer = buffer
        self.validator = validator
        self.executor = executor
        self.process_delay = process_delay

    @classmethod
    def from_config(cls, config: CheckProcessorConfig) -> "CheckProcessor":
        return cls(
            job_queue=config.job_queue,
            buffer=config.buffer,
            validator=config.validator,
            executor=config.executor,
            process_delay=config.process_delay or 0,
        )

    async def run_job(self, job: CheckJob) -> CheckResult:
        """Validate and run one job; errors become results, never exceptions."""
        if self.validator:
            valid, info = self.validator.validate(job)
            if not valid:
                logger.warning(f"CheckProcessor: {job.name} refused: {info.get('error', 'unknown error')}")
                return CheckResult(job.name, "refused", job.order, info=info)
        else:
            info = {}

        if self.process_delay:
            await asyncio.sleep(self.process_delay)

        loop = asyncio.get_running_loop()
        started = time.perf_counter()
        try:
            outcome = await loop.run_in_executor(self.executor, job.execute)
        except DyadicError as exc:
            logger.error(f"CheckProcessor: {job.name} failed with {type(exc).__name__}: {exc}")
            info = dict(info, error=str(exc), error_type=type(exc).__name__, exit_code=exc.exit_code)
            if getattr(exc, "condition", None):
                info["condition"] = exc.condition
            return CheckResult(job.name, "error", job.order, info=info, elapsed=time.perf_counter() - started)
        status = "pass" if _passed(outcome) else "fail"
        if status == "fail":
            logger.error(f"CheckProcessor: {job.name} did not pass")
        else:
            logger.info(f"CheckProcessor: {job.name} passed")
        return CheckResult(job.name, status, job.order, outcome, info, time.perf_counter() - started)

    async def process_jobs(self):
        """
        Continuously processes jobs by:
          1. Dequeuing a job.
          2. Validating it with the provided validator.
          3. Running it in the executor and putting the result in the buffer.
        """
        while True:
            job = await self.job_queue.get()
            logger.debug(f"CheckProcessor: Processing {job.name}")
            try:
                result = await self.run_job(job)
                self.checks_run.labels(check=job.name, status=result.status).inc()
                if self.buffer is None:
                    logger.debug(f"CheckProcessor: Skipping buffer addition for {job.name}.")
                else:
                    await self.buffer.put(result)
            finally:
                self.job_queue.task_done()
