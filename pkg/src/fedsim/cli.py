"""Command-line entry point: ``fedsim --scenario paper-joins --compare static_tree,serverless``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .kernel import SimulationError
from .metrics import write_comparison, write_report
from .scenario import (
    BACKENDS,
    ConfigError,
    ScenarioConfig,
    canned_names,
    compare,
    default_config_json,
    expand_sweep,
    load_canned,
    parse_config,
    run_scenario,
)
from .backend import RoundFailed

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsim", description="Simulate federated aggregation backends.")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", type=Path, help="scenario JSON file")
    src.add_argument("--scenario", help=f"canned scenario: {', '.join(canned_names())}")
    p.add_argument("--backend", choices=BACKENDS, help="override the configured backend")
    p.add_argument("--seed", type=int, help="override the configured seed (u64)")
    p.add_argument("--out", type=Path, help="report directory (summary printed to stdout if omitted)")
    p.add_argument("--format", choices=("json", "csv"), default="json", help="summary file format")
    p.add_argument("--compare", help="comma-separated backends to run on one shared party trace")
    p.add_argument("--print-defaults", action="store_true", help="print the default scenario and exit")
    p.add_argument("--list-scenarios", action="store_true", help="list canned scenarios and exit")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def _load(args: argparse.Namespace) -> ScenarioConfig:
    if args.config is not None:
        cfg = parse_config(args.config)
    elif args.scenario is not None:
        cfg = load_canned(args.scenario)
    else:
        cfg = ScenarioConfig()
    changes = {}
    if args.backend:
        changes["backend"] = args.backend
    if args.seed is not None:
        changes["seed"] = args.seed
    return cfg.with_(**changes) if changes else cfg


def _run(cfg: ScenarioConfig, args: argparse.Namespace, out: Path | None) -> dict:
    if args.compare:
        backends = [b.strip() for b in args.compare.split(",") if b.strip()]
        results, record = compare(cfg, backends)
        if out is not None:
            for r in results:
                write_report(r.report, out, args.format)
            write_comparison(record, out)
        return record
    result = run_scenario(cfg)
    if out is not None:
        write_report(result.report, out, args.format)
    return result.report.summary()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.print_defaults:
        sys.stdout.write(default_config_json())
        return EXIT_OK
    if args.list_scenarios:
        print("\n".join(canned_names()))
        return EXIT_OK
    try:
        cfg = _load(args)
        configs = expand_sweep(cfg)
        outputs = []
        for c in configs:
            out = args.out
            if out is not None and len(configs) > 1:
                out = out / c.name
            outputs.append(_run(c, args, out))
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, RoundFailed, RuntimeError, ValueError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.out is None:
        print(json.dumps(outputs[0] if len(outputs) == 1 else outputs, indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
