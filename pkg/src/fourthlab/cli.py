"""
Command-line harness.

    fourthlab <subcommand> [--config PATH] [--out DIR] [--seed N]
    fourthlab report RUN_DIR [RUN_DIR ...]

Exit codes: 0 every acceptance check passed, 1 invalid configuration,
2 an acceptance check failed (or a solver gave up).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import yaml

from . import experiments
from .config import ConfigError, RunConfig, default_config_path, load_config
from .continuation import ContinuationError
from .forward import SolverError
from .inverse_source import InverseError
from .io import CONFIG_NAME, SUMMARY_NAME, line_plot, read_summary, read_table, write_summary, write_table

logger = logging.getLogger("fourthlab")

EXIT_OK, EXIT_CONFIG, EXIT_FAILED = 0, 1, 2


class IncompleteRunError(ValueError):
    pass


def persist(result: experiments.RunResult, cfg: RunConfig, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    (out / "tables").mkdir(exist_ok=True)
    (out / "plots").mkdir(exist_ok=True)
    (out / CONFIG_NAME).write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False))
    for name, rows in result.tables.items():
        write_table(out / "tables" / f"{name}.csv", rows)
    for p in result.plots:
        line_plot(out / "plots" / f"{p.name}.svg", p.series, p.xlabel, p.ylabel, p.logx, p.logy, title=p.name)
    summary = {
        "command": result.command,
        "seed": cfg.seed,
        "passed": result.passed,
        "criteria": list(experiments.CRITERIA[result.command]),
        "checks": [c.__dict__ for c in result.checks],
        "scalars": result.scalars,
        "tables": sorted(result.tables),
        "plots": [p.name for p in result.plots],
    }
    write_summary(out / SUMMARY_NAME, summary)
    return out


def run(command: str, cfg: RunConfig, out: Path) -> int:
    start = time.perf_counter()
    try:
        result = experiments.RUNNERS[command](cfg)
    except (ContinuationError, SolverError, InverseError) as exc:
        logger.error("%s failed: %s", command, exc)
        return EXIT_FAILED
    persist(result, cfg, out)
    for c in result.checks:
        print(c.line())
    logger.info("%s finished in %.1f s; results in %s", command, time.perf_counter() - start, out)
    return EXIT_OK if result.passed else EXIT_FAILED


def _load_run(run_dir: Path) -> dict:
    if not run_dir.is_dir():
        raise IncompleteRunError(f"{run_dir}: not a directory")
    summary_path = run_dir / SUMMARY_NAME
    if not summary_path.is_file():
        raise IncompleteRunError(f"{run_dir}: incomplete run directory, no {SUMMARY_NAME}")
    if not (run_dir / CONFIG_NAME).is_file():
        raise IncompleteRunError(f"{run_dir}: incomplete run directory, no {CONFIG_NAME}")
    summary = read_summary(summary_path)
    missing = [t for t in summary.get("tables", []) if not (run_dir / "tables" / f"{t}.csv").is_file()]
    if missing:
        raise IncompleteRunError(f"{run_dir}: incomplete run directory, missing tables {missing}")
    return summary


def _num(v: str) -> str:
    try:
        return f"{float(v):.6g}"
    except ValueError:
        return v


def _table_block(path: Path, columns: Sequence[str]) -> list[str]:
    rows = read_table(path)
    lines = ["  " + "  ".join(f"{c:>14}" for c in columns)]
    for r in rows:
        lines.append("  " + "  ".join(f"{_num(r[c]):>14}" for c in columns))
    return lines


def emit_report(run_dirs: Sequence[Path]) -> str:
    """Human-readable summary across run directories: check grid, C_emp, thresholds, κ̂."""
    if not run_dirs:
        raise IncompleteRunError("no run directories given")
    lines, grid = [], []
    for rd in map(Path, run_dirs):
        s = _load_run(rd)
        lines.append(f"== {s['command']} ({rd}, seed {s['seed']}) ==")
        tables = rd / "tables"
        if (tables / "cmax.csv").is_file():
            sc = s["scalars"]
            lines.append(f"empirical s0 = {sc.get('s0')}, max C_emp = {sc.get('max_C_emp'):.6g}")
            lines.append("C_emp (max over the suite) by s:")
            lines += _table_block(tables / "cmax.csv", ["s", "C_max"])
        if (tables / "thresholds.csv").is_file():
            lines.append("level thresholds:")
            lines += _table_block(tables / "thresholds.csv", ["lam", "delta1", "delta2", "delta3", "delta4"])
        if (tables / "holder_fit.csv").is_file():
            hf = read_table(tables / "holder_fit.csv")[0]
            lines.append(f"kappa_hat = {_num(hf['kappa_hat'])}, R2 = {_num(hf['r2'])}, C_hat = {_num(hf['C_hat'])}")
        if (tables / "knees.csv").is_file():
            lines.append("balance s* against the fitted knee:")
            lines += _table_block(tables / "knees.csv", ["D", "knee", "s_star", "ratio"])
        for c in s["checks"]:
            tag = f"criterion {c['criterion']}" if c["criterion"] is not None else "diagnostic"
            grid.append(f"  {'PASS' if c['passed'] else 'FAIL'}  {s['command']:<16} {tag:<13} {c['name']}")
        lines.append("")
    lines.append("pass/fail grid:")
    lines += grid
    return "\n".join(lines) + "\n"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fourthlab", description=__doc__.strip().splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in experiments.RUNNERS:
        p = sub.add_parser(name, help=f"criteria {', '.join(map(str, experiments.CRITERIA[name]))}")
        p.add_argument("--config", type=Path, default=None, help="YAML config (default: packaged 1D config)")
        p.add_argument("--out", type=Path, default=None, help="run directory (default: runs/<subcommand>)")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    rep = sub.add_parser("report", help="summarise finished run directories")
    rep.add_argument("run_dirs", type=Path, nargs="+")
    rep.add_argument("--out", type=Path, default=None, help="also write the report to this file")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )
    if args.command == "report":
        try:
            text = emit_report(args.run_dirs)
        except IncompleteRunError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        if args.out is not None:
            args.out.write_text(text)
        print(text, end="")
        return EXIT_OK
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError(f"seed: must be non-negative, got {args.seed}")
        cfg = load_config(args.config or default_config_path()).with_seed(args.seed)
    except ConfigError as exc:
        print(f"invalid configuration:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or Path("runs") / args.command
    try:
        return run(args.command, cfg, out)
    except ValueError as exc:
        # geometry inconsistencies the schema cannot see (e.g. omega outside the domain)
        print(f"invalid configuration:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
