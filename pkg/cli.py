# cli.py
"""
Benchmark command line.

  python cli.py run [--config FILE] [--task ...] [--controllers a,b] [--seeds 0-4] ...
  python cli.py compare RUN_DIR_OR_METRICS_JSON ... [--baseline triggered] [--json] [--out FILE]

Exit codes: 0 success, 1 a run failed, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

# .env must be loaded before the modules below read their env defaults
load_dotenv()

from pydantic import ValidationError  # noqa: E402

from bench_agent import run_all  # noqa: E402
from logs import log  # noqa: E402
from report_agent import CompareError, compare_files, render_json, render_table  # noqa: E402
from run_config import load_run_config  # noqa: E402

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

_RUN_KEYS = (
    "task",
    "controllers",
    "seeds",
    "output_dir",
    "workers",
    "eta1",
    "delta",
    "horizon_t",
    "horizon_unit",
    "m_smooth",
    "m_triggered",
    "terminal_mode",
    "tightening",
    "duration",
    "terminal_samples",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cli.py", description="Delay-compensating MPC benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run controllers on a task and write trace/metrics files")
    run.add_argument("--config", type=Path, help="KEY=value config file")
    run.add_argument("--task", choices=["position_reach", "trajectory_track"])
    run.add_argument("--controllers", help="comma list of ideal,triggered,smooth")
    run.add_argument("--seeds", help="comma list or inclusive range, e.g. 0-4")
    run.add_argument("--output-dir", dest="output_dir")
    run.add_argument("--workers", type=int)
    run.add_argument("--eta1", type=float, help="disturbance bound per step")
    run.add_argument("--delta", type=float, help="sampling step in seconds")
    run.add_argument("--horizon-t", dest="horizon_t", type=float)
    run.add_argument("--horizon-unit", dest="horizon_unit", choices=["seconds", "steps"],
                     help="read horizon_t as seconds (N = T/delta) or as a step count")
    run.add_argument("--m-smooth", dest="m_smooth", type=int)
    run.add_argument("--m-triggered", dest="m_triggered", type=int)
    run.add_argument("--terminal-mode", dest="terminal_mode", choices=["soft", "hard", "none"])
    run.add_argument("--tightening", choices=["state", "full", "certified", "none"])
    run.add_argument("--duration", type=int, help="closed-loop steps")
    run.add_argument("--terminal-samples", dest="terminal_samples", type=int)
    run.add_argument("--no-trace", dest="write_trace", action="store_false", default=None)

    cmp_ = sub.add_parser("compare", help="compare finished runs")
    cmp_.add_argument("paths", nargs="+", type=Path, help="run directories or metrics.json files")
    cmp_.add_argument("--baseline", help="controller the percentage column is relative to")
    cmp_.add_argument("--json", action="store_true", help="print JSON instead of the text table")
    cmp_.add_argument("--out", type=Path, help="also write the JSON report here")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    out = {key: getattr(args, key) for key in _RUN_KEYS}
    out["write_trace"] = args.write_trace
    return {k: v for k, v in out.items() if v is not None}


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = load_run_config(args.config, _overrides(args))
    except (ValidationError, ValueError, FileNotFoundError) as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_USAGE
    results = run_all(cfg)
    for r in results:
        status = "ok" if r.ok else f"FAILED {r.error}"
        print(f"{r.key}: {status} -> {r.out_dir}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAILED


def cmd_compare(args: argparse.Namespace) -> int:
    try:
        report = compare_files(args.paths, baseline=args.baseline)
    except (CompareError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    text = render_json(report)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text, encoding="utf-8")
    print(text if args.json else render_table(report))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_compare(args)
    except Exception as e:
        log("error", "cli_failed", command=args.command, error=str(e)[:500])
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
