"""Command-line front end.

    dyadic-tents domain check --domain ball2.json
    dyadic-tents grid build --domain ball2.json --points 4000 --delta 0.5 --depth 4 --out grid.json
    dyadic-tents tents verify --grid grid.json --checks flow,whitney,equivalence --out report.csv
    dyadic-tents all --domain ball2.json --seed 42 --out-dir results

Every check runs as a job of the suite manager. Reports are CSV files whose first line is
``# config: {...}``; the exit code is 0 only when every requested check passed.
"""
import argparse
import csv
from dataclasses import dataclass, field
from fractions import Fraction
import json
import logging
import math
from pathlib import Path
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from typing_extensions import Self

from dyadic_flow_tents import suites
from dyadic_flow_tents.asynchronous import (
    CheckJob,
    CheckResult,
    CompositeValidator,
    DeltaConditionValidator,
    DepthValidator,
    ExponentValidator,
    SampleCountValidator,
    ScaleValidator,
)
from dyadic_flow_tents.boundary_sht import GridFamily, minimal_stride
from dyadic_flow_tents.domain_model import DomainSpec
from dyadic_flow_tents.exceptions import DyadicError
from dyadic_flow_tents.suite_manager import SuiteConfig, SuiteManager, suite_exit_code, workers_from_env

logger = logging.getLogger(__name__)

RANGE_OPTIONS = ("--alphas",)
# paths never enter the report header, so reruns into another directory stay byte-identical
UNRECORDED = ("out", "out_dir", "report", "cache", "verbose")
ALL_REPORTS = {
    "domain": "domain.csv",
    "grid": "grid.csv",
    "tents": "tents.csv",
    "geometry": "geometry.csv",
    "bergman": "a_estimate.csv",
    "sparse": "sparse.csv",
    "weighted": "slopes.csv",
}


@dataclass
class RunConfig:
    """Parsed command line: the command, its inputs and every numeric parameter."""

    command: str
    domain: Optional[str] = None
    grid: Optional[str] = None
    out: Optional[str] = None
    seed: int = 0
    params: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> Self:
        reserved = {"command", "group", "action", "domain", "grid", "out", "seed"}
        return cls(
            command=args.command,
            domain=getattr(args, "domain", None),
            grid=getattr(args, "grid", None),
            out=getattr(args, "out", None),
            seed=args.seed,
            params={k: v for k, v in vars(args).items() if k not in reserved},
        )

    def to_document(self, domain: Optional[DomainSpec] = None) -> Dict[str, Any]:
        return {
            "command": self.command,
            "seed": self.seed,
            "domain": domain.to_document() if domain is not None else self.domain,
            "grid": Path(self.grid).name if self.grid else None,
            "params": {k: v for k, v in self.params.items() if k not in UNRECORDED},
        }


def parse_ladder(text: str) -> List[float]:
    """``start:stop:step`` (inclusive) or a comma separated list."""
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            if step <= 0:
                raise ValueError
            count = int(math.floor((stop - start) / step + 1e-9)) + 1
            return [round(start + k * step, 12) + 0.0 for k in range(count)]
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected start:stop:step or a comma list, got {text!r}") from None


def parse_exponent(text: str) -> float:
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"Not an exponent: {text!r}") from None


def parse_stride(text: str) -> Optional[int]:
    if text == "auto":
        return None
    try:
        stride = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"Stride must be a positive integer or 'auto', got {text!r}") from None
    if stride < 1:
        raise argparse.ArgumentTypeError(f"Stride must be positive, got {stride}")
    return stride


def _checks_parser(allowed: Sequence[str]) -> Callable[[str], List[str]]:
    def parse(text: str) -> List[str]:
        checks = [c.strip() for c in text.split(",") if c.strip()]
        unknown = [c for c in checks if c not in allowed]
        if unknown or not checks:
            raise argparse.ArgumentTypeError(f"Unknown checks {unknown}; choose from {', '.join(allowed)}")
        return checks

    return parse


def _attach_values(argv: Sequence[str], options: Sequence[str]) -> List[str]:
    """Join ``--alphas -0.6:0.6:0.2`` into one token so argparse does not read the value as a flag."""
    out: List[str] = []
    i = 0
    while i < len(argv):
        if argv[i] in options and i + 1 < len(argv):
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def _add_seed(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="Master seed (default: 0).")


def _add_grid_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--points", type=int, default=4000, help="Boundary sample size (default: 4000).")
    p.add_argument("--delta", type=float, default=0.5, help="Base level ratio (default: 0.5).")
    p.add_argument("--depth", type=int, default=4, help="Number of levels below N0 (default: 4).")
    p.add_argument(
        "--stride",
        type=parse_stride,
        default=None,
        help="Level stride N, or 'auto' for the smallest admissible one (default: auto).",
    )
    p.add_argument("--k0", type=int, default=8, help="Grids in the adjacent family (default: 8).")
    p.add_argument("--kappa", type=float, default=None, help="Quasi-triangle constant for condition (a).")
    p.add_argument("--c-omega", type=float, default=None, help="Comparability constant for condition (b).")
    p.add_argument("--estimate-constants", action="store_true", help="Estimate kappa and C_Omega from the sample.")
    p.add_argument("--refinement", type=int, default=0, help="Extra rays per point for surface weights.")
    p.add_argument(
        "--calibrate-thresholds",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="Calibrate tau1 and tau2 and start the grids below them (default: on).",
    )


def _add_kernel_options(p: argparse.ArgumentParser, nodes: bool = True) -> None:
    p.add_argument("--cache", default=None, help="Directory for cached moment tables.")
    if nodes:
        p.add_argument("--nodes", type=int, default=200_000, help="Quadrature nodes (default: 200000).")


def _add_weighted_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--p", type=parse_exponent, nargs="+", default=[2.0], help="Lebesgue exponents, e.g. 4/3 2 4.")
    p.add_argument("--alphas", type=parse_ladder, default=parse_ladder("-0.6:0.6:0.2"), help="Power-weight ladder.")
    p.add_argument("--trials", type=int, default=50, help="Random node-mass trials (default: 50).")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dyadic-tents",
        description="Dyadic flow tents, Bergman kernel bounds and weighted estimates on model domains.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logging.")
    groups = parser.add_subparsers(dest="group", required=True)

    domain = groups.add_parser("domain", help="Domain model checks.").add_subparsers(dest="action", required=True)
    p = domain.add_parser("check", help="Jet residuals, convexity and C_Omega.")
    p.add_argument("--domain", required=True, help="Domain JSON document.")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--out", default=None, help="CSV report.")
    _add_seed(p)
    p.set_defaults(command="domain check")

    grid = groups.add_parser("grid", help="Dyadic grid families.").add_subparsers(dest="action", required=True)
    p = grid.add_parser("build", help="Sample the boundary and build an adjacent family.")
    p.add_argument("--domain", required=True)
    p.add_argument("--out", required=True, help="Grid family JSON.")
    p.add_argument("--report", default=None, help="CSV report (default: next to --out).")
    _add_grid_options(p)
    _add_seed(p)
    p.set_defaults(command="grid build")

    tents = groups.add_parser("tents", help="Flow tents.").add_subparsers(dest="action", required=True)
    p = tents.add_parser("verify", help="Flow exactness, Whitney pieces and tent equivalence.")
    p.add_argument("--grid", required=True)
    p.add_argument("--checks", type=_checks_parser(suites.TENT_CHECKS), default=list(suites.TENT_CHECKS))
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--out", default=None)
    _add_seed(p)
    p.set_defaults(command="tents verify")

    geometry = groups.add_parser("geometry", help="Level-set geometry.").add_subparsers(dest="action", required=True)
    p = geometry.add_parser("verify", help="Curvature, area evolution and tent volumes.")
    p.add_argument("--grid", required=True)
    p.add_argument("--checks", type=_checks_parser(suites.GEOMETRY_CHECKS), default=list(suites.GEOMETRY_CHECKS))
    p.add_argument("--samples", type=int, default=20_000)
    p.add_argument("--cubes", type=int, default=16, help="Cubes per level for volume ratios (default: 16).")
    p.add_argument("--out", default=None)
    _add_seed(p)
    p.set_defaults(command="geometry verify")

    bergman = groups.add_parser("bergman", help="Bergman kernel.").add_subparsers(dest="action", required=True)
    p = bergman.add_parser("scan", help="Kernel-tent bound over random pairs.")
    p.add_argument("--grid", required=True)
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--margin", type=float, default=0.2, help="Series compactum margin (default: 0.2).")
    p.add_argument("--out", default=None)
    _add_kernel_options(p, nodes=False)
    _add_seed(p)
    p.set_defaults(command="bergman scan")

    sparse = groups.add_parser("sparse", help="Sparse domination.").add_subparsers(dest="action", required=True)
    p = sparse.add_parser("check", help="|Pf| against the sparse operator.")
    p.add_argument("--grid", required=True)
    p.add_argument("--count", type=int, default=50, help="Random node-mass functions (default: 50).")
    p.add_argument("--out", default=None)
    _add_kernel_options(p)
    _add_seed(p)
    p.set_defaults(command="sparse check")

    weighted = groups.add_parser("weighted", help="Weighted estimates.").add_subparsers(dest="action", required=True)
    p = weighted.add_parser("run", help="A_p slope experiment.")
    p.add_argument("--grid", required=True)
    p.add_argument("--out", default=None)
    _add_weighted_options(p)
    _add_kernel_options(p)
    _add_seed(p)
    p.set_defaults(command="weighted run")

    p = groups.add_parser("all", help="Full pipeline into one output directory.")
    p.add_argument("--domain", required=True)
    p.add_argument("--out-dir", default="results")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--cubes", type=int, default=16)
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--count", type=int, default=50)
    _add_grid_options(p)
    _add_weighted_options(p)
    _add_kernel_options(p)
    _add_seed(p)
    p.set_defaults(command="all", p=list(suites.DEFAULT_EXPONENTS))
    return parser


def default_validator(config: RunConfig) -> CompositeValidator:
    p = config.params
    return CompositeValidator(
        [
            DeltaConditionValidator(name_pattern=r"^grid", kappa=p.get("kappa"), c_omega=p.get("c_omega")),
            DepthValidator(name_pattern=r"^grid", depth_min=3),
            SampleCountValidator(name_pattern=r"^grid", key="points", minimum=500),
            SampleCountValidator(key="samples", minimum=1),
            SampleCountValidator(key="nodes", minimum=1000),
            SampleCountValidator(key="pairs", minimum=1),
            SampleCountValidator(key="trials", minimum=1),
            ScaleValidator(name_pattern=r"equivalence", key="eps"),
            ExponentValidator(name_pattern=r"^weighted"),
        ]
    )


def _cell(value: Any) -> Any:
    if isinstance(value, np.generic):
        value = value.item()
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".12g")
    if isinstance(value, (list, tuple, np.ndarray)):
        return ";".join(str(_cell(v)) for v in value)
    return value


def result_rows(results: Sequence[CheckResult]) -> List[Dict[str, Any]]:
    """Flatten check results into report rows; refusals and errors become error records."""
    rows: List[Dict[str, Any]] = []
    for r in results:
        base = {"check": r.name, "status": r.status}
        if r.outcome is None:
            record = {k: r.info[k] for k in ("error", "error_type", "condition") if k in r.info}
            rows.append({**base, "record": "error", **record})
            continue
        rows.extend({**base, **row} for row in r.outcome.rows)
        rows.extend({**base, "record": "skipped", "reason": reason, "detail": detail} for reason, detail in r.outcome.skipped)
    return rows


def write_report(path: Path, header: Dict[str, Any], rows: Sequence[Dict[str, Any]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(dict.fromkeys(k for row in rows for k in row))
    with path.open("w", newline="") as fh:
        fh.write(f"# config: {json.dumps(header, sort_keys=True)}\n")
        writer = csv.DictWriter(fh, fieldnames=fields, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(v) for k, v in row.items()})
    logger.info(f"Report written to {path}")


def _report_path(config: RunConfig) -> Optional[Path]:
    if config.command == "grid build":
        return Path(config.params.get("report") or Path(config.out).with_suffix(".csv"))
    if config.command == "all":
        return Path(config.params["out_dir"]) / "errors.csv"
    return Path(config.out) if config.out else None


def execute(config: RunConfig, jobs: Sequence[CheckJob]) -> List[CheckResult]:
    manager = SuiteManager(SuiteConfig(), validator=default_validator(config))
    results = manager.run_sync(jobs)
    for r in results:
        detail = f" ({r.info['error']})" if "error" in r.info else ""
        print(f"{r.name}: {r.status.upper()}{detail}")
    return results


def _grid_job(config: RunConfig, domain: DomainSpec, out: Path) -> CheckJob:
    p = config.params
    stride = p["stride"]
    if stride is None and not p["estimate_constants"]:
        stride = minimal_stride(p["delta"], p["kappa"], p["c_omega"] or domain.c_omega)
        logger.info(f"Level stride {stride} selected")
    params = {
        "domain": domain,
        "points": p["points"],
        "delta": p["delta"],
        "depth": p["depth"],
        "seed": config.seed,
        "k0": p["k0"],
        "stride": stride,
        "kappa": p["kappa"],
        "c_omega": p["c_omega"],
        "estimate_constants": p["estimate_constants"],
        "refinement": p["refinement"],
        "calibrate_thresholds": p["calibrate_thresholds"],
        "workers": workers_from_env(),
        "out": out,
    }
    return CheckJob("grid", suites.grid_suite, params, domain)


def _tent_jobs(config: RunConfig, family: GridFamily, checks: Sequence[str]) -> List[CheckJob]:
    samples = config.params["samples"]
    base = {"family": family, "seed": config.seed}
    jobs = {
        "flow": CheckJob("tents.flow", suites.flow_suite, dict(base, samples=samples), family.domain),
        "whitney": CheckJob("tents.whitney", suites.whitney_suite, dict(base, samples=samples), family.domain),
        "equivalence": CheckJob(
            "tents.equivalence",
            suites.equivalence_suite,
            dict(base, samples=min(samples, 200), eps=list(suites.EQUIVALENCE_LADDER)),
            family.domain,
        ),
    }
    return [jobs[c] for c in checks]


def _geometry_jobs(config: RunConfig, family: GridFamily, checks: Sequence[str]) -> List[CheckJob]:
    p = config.params
    base = {"family": family, "seed": config.seed}
    jobs = {
        "curvature": CheckJob(
            "geometry.curvature", suites.curvature_suite, dict(base, samples=min(p["samples"], 100)), family.domain
        ),
        "evolution": CheckJob("geometry.evolution", suites.evolution_suite, base, family.domain),
        "volumes": CheckJob(
            "geometry.volumes", suites.volume_suite, dict(base, samples=p["samples"], cubes=p["cubes"]), family.domain
        ),
    }
    return [jobs[c] for c in checks]


def _bergman_job(config: RunConfig, family: GridFamily) -> CheckJob:
    p = config.params
    params = {"family": family, "pairs": p["pairs"], "seed": config.seed, "cache_dir": p["cache"]}
    if "margin" in p:
        params["margin"] = p["margin"]
    return CheckJob("bergman.scan", suites.kernel_tent_suite, params, family.domain)


def _sparse_job(config: RunConfig, family: GridFamily) -> CheckJob:
    p = config.params
    params = {"family": family, "nodes": p["nodes"], "count": p["count"], "seed": config.seed, "cache_dir": p["cache"]}
    return CheckJob("sparse.check", suites.sparse_suite, params, family.domain)


def _weighted_job(config: RunConfig, family: GridFamily) -> CheckJob:
    p = config.params
    params = {
        "family": family,
        "p": list(p["p"]),
        "alphas": list(p["alphas"]),
        "trials": p["trials"],
        "nodes": p["nodes"],
        "seed": config.seed,
        "cache_dir": p["cache"],
    }
    return CheckJob("weighted.run", suites.weighted_suite, params, family.domain)


def _finish(config: RunConfig, results: Sequence[CheckResult], path: Optional[Path], domain: DomainSpec) -> int:
    if path is not None:
        write_report(path, config.to_document(domain), result_rows(results))
    return suite_exit_code(results)


def run_domain(config: RunConfig) -> int:
    domain = DomainSpec.load(config.domain)
    params = {"domain": domain, "samples": config.params["samples"], "seed": config.seed}
    results = execute(config, [CheckJob("domain", suites.domain_suite, params, domain)])
    return _finish(config, results, _report_path(config), domain)


def run_grid(config: RunConfig) -> int:
    domain = DomainSpec.load(config.domain)
    results = execute(config, [_grid_job(config, domain, Path(config.out))])
    return _finish(config, results, _report_path(config), domain)


def _with_family(build: Callable[[RunConfig, GridFamily], List[CheckJob]]) -> Callable[[RunConfig], int]:
    def handler(config: RunConfig) -> int:
        family = GridFamily.load(config.grid)
        results = execute(config, build(config, family))
        return _finish(config, results, _report_path(config), family.domain)

    return handler


def run_all(config: RunConfig) -> int:
    """Domain check, grid build, then every suite on the family, one report per group."""
    out_dir = Path(config.params["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    domain = DomainSpec.load(config.domain)
    header = config.to_document(domain)
    grid_path = out_dir / "grid.json"

    results = execute(config, [CheckJob("domain", suites.domain_suite, {"domain": domain, "seed": config.seed}, domain)])
    results += execute(config, [_grid_job(config, domain, grid_path)])
    if results[-1].status in ("refused", "error"):
        for group in ("domain", "grid"):
            write_report(out_dir / ALL_REPORTS[group], header, result_rows([r for r in results if r.name == group]))
        return suite_exit_code(results)

    family = GridFamily.load(grid_path)
    jobs = (
        _tent_jobs(config, family, suites.TENT_CHECKS)
        + _geometry_jobs(config, family, suites.GEOMETRY_CHECKS)
        + [_bergman_job(config, family), _sparse_job(config, family), _weighted_job(config, family)]
    )
    results += execute(config, jobs)
    for group, name in ALL_REPORTS.items():
        chosen = [r for r in results if r.name.split(".")[0] == group]
        write_report(out_dir / name, header, result_rows(chosen))
    return suite_exit_code(results)


COMMANDS: Dict[str, Callable[[RunConfig], int]] = {
    "domain check": run_domain,
    "grid build": run_grid,
    "tents verify": _with_family(lambda c, f: _tent_jobs(c, f, c.params["checks"])),
    "geometry verify": _with_family(lambda c, f: _geometry_jobs(c, f, c.params["checks"])),
    "bergman scan": _with_family(lambda c, f: [_bergman_job(c, f)]),
    "sparse check": _with_family(lambda c, f: [_sparse_job(c, f)]),
    "weighted run": _with_family(lambda c, f: [_weighted_job(c, f)]),
    "all": run_all,
}


def run(config: RunConfig) -> int:
    """Execute one command; module errors before the checks start become an error record."""
    try:
        return COMMANDS[config.command](config)
    except DyadicError as exc:
        logger.error(f"{config.command} failed with {type(exc).__name__}: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        path = _report_path(config)
        if path is not None:
            record = {"check": config.command, "status": "error", "record": "error", "error": str(exc)}
            record["error_type"] = type(exc).__name__
            if getattr(exc, "condition", None):
                record["condition"] = exc.condition
            write_report(path, config.to_document(), [record])
        return exc.exit_code


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(_attach_values(argv, RANGE_OPTIONS))
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    return run(RunConfig.from_args(args))


if __name__ == "__main__":
    sys.exit(main())
