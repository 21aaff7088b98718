"""Command-line entry points.

Subcommands: run (execute a scenario, write its log), check-config
(validate config documents), replay (re-verify a log's digest chain and
enforcement soundness), metrics (print a log's metric report).

Exit codes: 0 success, 1 validation failure, 2 invariant violation,
3 adapter failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .errors import (
    BasePolicyUnavailable,
    GuardloopError,
    InvariantViolation,
    ParseError,
    RolloutPolicyUnavailable,
    ValidationError,
)
from .features import builtin_feature_names
from .harness import (
    TrajectoryLog,
    load_scenario,
    metrics,
    replay,
    run_scenario,
    shipped_asset,
)
from .observer import parse_fallback_library
from .overlays import parse_overlay_set
from .supervisor import parse_supervisor_config

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_INVARIANT = 2
EXIT_ADAPTER = 3

logger = logging.getLogger(__name__)


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except (ParseError, ValidationError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (BasePolicyUnavailable, RolloutPolicyUnavailable) as exc:
        print(f"adapter failure: {exc}", file=sys.stderr)
        return EXIT_ADAPTER
    except GuardloopError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="guardloop")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one or more scenarios")
    run.add_argument("--scenario", action="append", required=True, dest="scenarios")
    run.add_argument("--overlays", help="overlay pack file overriding the default pack")
    run.add_argument("--supervisor", help="supervisor config file override")
    run.add_argument("--fallbacks", help="fallback library file override")
    run.add_argument("--out", help="output log path (single scenario) or directory")
    run.add_argument("--seed", type=int, default=0,
                     help="forwarded to adapters that declare randomness")
    run.add_argument("--parallel", type=int, default=1, metavar="N",
                     help="run independent scenarios concurrently")
    run.set_defaults(handler=_cmd_run)

    check = sub.add_parser("check-config", help="validate config documents")
    check.add_argument("--overlays", action="append", default=[])
    check.add_argument("--supervisor", action="append", default=[])
    check.add_argument("--fallbacks", action="append", default=[])
    check.add_argument("--scenario", action="append", default=[])
    check.set_defaults(handler=_cmd_check_config)

    rep = sub.add_parser("replay", help="re-verify a trajectory log")
    rep.add_argument("--log", required=True)
    rep.set_defaults(handler=_cmd_replay)

    met = sub.add_parser("metrics", help="print a log's metric report")
    met.add_argument("--log", required=True)
    met.set_defaults(handler=_cmd_metrics)

    return parser


def _run_one(path: str, args) -> tuple[str, str]:
    scenario = load_scenario(
        path,
        overlays_override=args.overlays,
        supervisor_override=args.supervisor,
        fallbacks_override=args.fallbacks,
    )
    log = run_scenario(scenario)
    return scenario.id, log.to_jsonl()


def _cmd_run(args) -> int:
    results: list[tuple[str, str]] = []
    if args.parallel > 1 and len(args.scenarios) > 1:
        with ThreadPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(lambda p: _run_one(p, args), args.scenarios))
    else:
        results = [_run_one(p, args) for p in args.scenarios]

    for scenario_id, text in results:
        if args.out is None:
            sys.stdout.write(text)
            continue
        out = Path(args.out)
        if len(results) > 1 or out.is_dir():
            out.mkdir(parents=True, exist_ok=True)
            target = out / f"{scenario_id}.jsonl"
        else:
            out.parent.mkdir(parents=True, exist_ok=True)
            target = out
        target.write_text(text, encoding="utf-8")
        print(f"wrote {target}")
    return EXIT_OK


def _shipped_configs() -> dict[str, list[Path]]:
    def listing(kind: str) -> list[Path]:
        directory = shipped_asset(kind)
        return sorted(directory.glob("*.json"))

    return {
        "overlays": listing("overlays"),
        "supervisor": listing("supervisors"),
        "fallbacks": listing("fallbacks"),
        "scenario": listing("scenarios"),
    }


def _cmd_check_config(args) -> int:
    targets: dict[str, list[Path]] = {
        "overlays": [Path(p) for p in args.overlays],
        "supervisor": [Path(p) for p in args.supervisor],
        "fallbacks": [Path(p) for p in args.fallbacks],
        "scenario": [Path(p) for p in args.scenario],
    }
    if not any(targets.values()):
        targets = _shipped_configs()

    names = builtin_feature_names()
    failures = 0
    for kind, paths in targets.items():
        for path in paths:
            try:
                text = path.read_text(encoding="utf-8")
                if kind == "overlays":
                    parse_overlay_set(text, names)
                elif kind == "supervisor":
                    parse_supervisor_config(text, names)
                elif kind == "fallbacks":
                    parse_fallback_library(text)
                else:
                    load_scenario(path)
            except (ParseError, ValidationError, OSError) as exc:
                failures += 1
                print(f"FAIL {kind} {path}: {exc}")
                continue
            print(f"ok   {kind} {path}")
    return EXIT_VALIDATION if failures else EXIT_OK


def _cmd_replay(args) -> int:
    text = Path(args.log).read_text(encoding="utf-8")
    log = TrajectoryLog.from_jsonl(text)
    report = replay(log)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def _cmd_metrics(args) -> int:
    text = Path(args.log).read_text(encoding="utf-8")
    log = TrajectoryLog.from_jsonl(text)
    print(json.dumps(metrics(log), indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
