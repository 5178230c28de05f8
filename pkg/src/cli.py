"""
Command line front end

    sheetspace run <scenario.json> [--out DIR] [--jobs K] [--quiet]
    sheetspace describe <scenario.json>

Exit codes: 0 all checks passed, 1 a check failed (reports are still
written), 2 invalid input.
"""

import argparse
import sys
import threading
from datetime import datetime
from pathlib import Path
from typing import List, Optional, TextIO

from report_writer import ReportWriter
from scenario_manager import ScenarioManager, resolve_scenario_path
from verification_engine import VerificationEngine

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INVALID_INPUT = 2


class StderrLogger:
    """log_callback writing "[HH:MM:SS] [LEVEL] message" lines; safe across threads."""

    QUIET_LEVELS = ("DEBUG", "INFO")

    def __init__(self, stream: Optional[TextIO] = None, quiet: bool = False, verbose: bool = False):
        self.stream = stream or sys.stderr
        self.quiet = quiet
        self.verbose = verbose
        self._lock = threading.Lock()

    def __call__(self, level: str, message: str):
        if self.quiet and level in self.QUIET_LEVELS:
            return
        if level == "DEBUG" and not self.verbose:
            return
        timestamp = datetime.now().strftime("%H:%M:%S")
        with self._lock:
            self.stream.write(f"[{timestamp}] [{level}] {message}\n")
            self.stream.flush()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sheetspace",
        description="Finite-difference verification of the geometry of codimension-2 world-sheets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run the checks of a scenario and write reports")
    run.add_argument("scenario", help="Scenario JSON file or bundled scenario name")
    run.add_argument("--out", default=None, help="Report directory (overrides the scenario output block)")
    run.add_argument("--jobs", type=int, default=1, help="Checks run concurrently (default 1)")
    run.add_argument("--quiet", action="store_true", help="Only warnings and errors on stderr")
    run.add_argument("--verbose", action="store_true", help="Include debug messages")

    describe = sub.add_parser("describe", help="Print dimensions, grid and planned checks")
    describe.add_argument("scenario", help="Scenario JSON file or bundled scenario name")
    return parser


def load_scenario(name: str, log: StderrLogger) -> Optional[ScenarioManager]:
    """Load and validate; None (after reporting) when the scenario is unusable."""
    path = resolve_scenario_path(name)
    manager, success, message = ScenarioManager.load(str(path))
    if not success:
        log("ERROR", message)
        return None
    log("DEBUG", message)
    valid, errors = manager.validate()
    if not valid:
        for error in errors:
            log("ERROR", error)
        return None
    return manager


def cmd_describe(args: argparse.Namespace, log: StderrLogger, out: TextIO) -> int:
    manager = load_scenario(args.scenario, log)
    if manager is None:
        return EXIT_INVALID_INPUT
    out.write(manager.get_summary() + "\n")
    return EXIT_OK


def cmd_run(args: argparse.Namespace, log: StderrLogger, out: TextIO) -> int:
    if args.jobs < 1:
        log("ERROR", f"--jobs must be >= 1, got {args.jobs}")
        return EXIT_INVALID_INPUT
    manager = load_scenario(args.scenario, log)
    if manager is None:
        return EXIT_INVALID_INPUT

    engine = VerificationEngine(manager)
    engine.set_log_callback(log)
    log("INFO", f"Scenario '{manager.name}' (seed {manager.seed})")
    try:
        results = engine.run(jobs=args.jobs)
    except (ValueError, ArithmeticError) as e:
        log("ERROR", f"{type(e).__name__}: {e}")
        return EXIT_INVALID_INPUT

    out_dir = Path(args.out) if args.out else Path(manager.output.directory)
    scenario_info = {"name": manager.name, "source": manager.source_path, "seed": manager.seed,
                     "seed_from_environment": manager.seed_overridden}
    try:
        written = ReportWriter(out_dir).write(results, scenario_info, engine.flow_report, manager.output.formats)
    except OSError as e:
        log("ERROR", f"Failed to write reports to {out_dir}: {e}")
        return EXIT_INVALID_INPUT
    for path in written:
        log("INFO", f"Wrote {path}")

    failed = [r.check for r in results if not r.passed]
    summary = f"{len(results) - len(failed)}/{len(results)} checks passed"
    out.write(summary + (f" (failed: {', '.join(failed)})" if failed else "") + "\n")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def main(argv: Optional[List[str]] = None, stdout: Optional[TextIO] = None,
         stderr: Optional[TextIO] = None) -> int:
    """Main entry point; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INVALID_INPUT if e.code else EXIT_OK
    log = StderrLogger(stderr, quiet=getattr(args, "quiet", False), verbose=getattr(args, "verbose", False))
    out = stdout or sys.stdout
    if args.command == "describe":
        return cmd_describe(args, log, out)
    return cmd_run(args, log, out)


if __name__ == "__main__":
    sys.exit(main())
