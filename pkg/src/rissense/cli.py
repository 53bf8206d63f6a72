"""Command line entry point: ``rissense {sense,radar,localize,slam,sweep} --scenario FILE``.

Exit codes: 0 success, 1 invalid arguments or scenario, 2 runtime failure
(records produced before the failure are still written).
"""

from __future__ import annotations

import argparse
import sys

from . import harness

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rissense", description="Run RIS sensing/radar/localization/SLAM scenarios.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in (*harness.MODULES, "sweep"):
        help_ = ("run every module of the scenario over its sweep values" if name == "sweep"
                 else f"run the {name} module of the scenario")
        s = sub.add_parser(name, help=help_)
        s.add_argument("--scenario", required=True, help="scenario YAML file")
        s.add_argument("--seed", type=int, help="root seed (u64)")
        s.add_argument("--seeds", type=int, help="run seeds 0..n-1")
        s.add_argument("--cycles", type=int, help="cycles per run")
        s.add_argument("--out", help="output directory")
        s.add_argument("--format", choices=("csv", "json"), help="output format")
        s.add_argument("--scheme", help="run a single scheme")
        s.add_argument("--workers", type=int, help="parallel seed workers")
    return p


def _configure(args) -> harness.ScenarioSpec:
    data = harness.load_scenario(args.scenario).model_dump(mode="json")
    for key in ("seed", "seeds", "cycles", "workers"):
        if getattr(args, key) is not None:
            data[key] = getattr(args, key)
    if args.out is not None:
        data["output"]["dir"] = args.out
    if args.format is not None:
        data["output"]["format"] = args.format
    if args.command != "sweep":
        data["module"] = [args.command]
        data["sweep"] = None
    if args.scheme is not None:
        for m in data["module"]:
            data[m]["schemes"] = [args.scheme]
    return harness.validate_scenario(data)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        spec = _configure(args)
    except harness.ScenarioError as e:
        print(f"rissense: invalid scenario: {e}", file=sys.stderr)
        return EXIT_INVALID
    path = harness.output_path(spec)
    code = EXIT_OK
    try:
        records = harness.run_sweep(spec)
    except harness.RunFailure as e:
        print(f"rissense: run failed: {e}", file=sys.stderr)
        records, code = e.records, EXIT_RUNTIME
    try:
        harness.emit(records, path, spec.output.format)
    except OSError as e:
        print(f"rissense: cannot write {path}: {e.strerror}", file=sys.stderr)
        return EXIT_RUNTIME
    print(path)
    return code


if __name__ == "__main__":
    sys.exit(main())
