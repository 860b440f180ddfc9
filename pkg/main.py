#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Example pipeline on the unit ball in C^2: build a small adjacent grid family,
coarsened until condition (a) holds, then run flow, curvature and kernel-tent
checks through a SuiteManager with a CompositeValidator gating each job.
"""
import asyncio
import logging
from pathlib import Path

from dyadic_flow_tents import suites
from dyadic_flow_tents.asynchronous import (
    CheckJob,
    CompositeValidator,
    DeltaConditionValidator,
    SampleCountValidator,
)
from dyadic_flow_tents.boundary_sht import GridFamily
from dyadic_flow_tents.domain_model import DomainSpec
from dyadic_flow_tents.suite_manager import SuiteConfig, SuiteManager, suite_exit_code

OUTPUT = Path("./results")
SEED = 42

logger = logging.getLogger(__name__)
logging.basicConfig(level=logging.INFO)


def report(result):
    logger.info(f"{result.name}: {result.status}")
    if result.outcome is not None:
        for row in result.outcome.rows:
            logger.info(f"  {row}")


async def main():
    OUTPUT.mkdir(exist_ok=True)
    ball = DomainSpec(kind="ball", n=2)
    grid_path = OUTPUT / "grid.json"

    validator = CompositeValidator(
        [
            DeltaConditionValidator(name_pattern="^grid"),
            SampleCountValidator(name_pattern="^grid", key="points", minimum=500),
        ]
    )
    manager = SuiteManager(SuiteConfig(), validator=validator, consume_callback=report)

    grid_job = CheckJob(
        "grid",
        suites.grid_suite,
        {
            "domain": ball,
            "points": 600,
            "delta": 0.5,
            "stride": None,
            "depth": 3,
            "seed": SEED,
            "k0": 3,
            "out": grid_path,
        },
        ball,
    )
    results = await manager.run([grid_job])
    if results[0].outcome is None:
        return suite_exit_code(results)

    family = GridFamily.load(grid_path)
    jobs = [
        CheckJob("tents.flow", suites.flow_suite, {"family": family, "samples": 1000, "seed": SEED}, ball),
        CheckJob("geometry.curvature", suites.curvature_suite, {"family": family, "seed": SEED}, ball),
        CheckJob("bergman.scan", suites.kernel_tent_suite, {"family": family, "pairs": 20, "seed": SEED}, ball),
    ]
    results += await manager.run(jobs)
    return suite_exit_code(results)


if __name__ == "__main__":
    raise SystemExit(asyncio.run(main()))
