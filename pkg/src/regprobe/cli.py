"""Command line front end.

Subcommands:

- ``run``: execute one or more scenarios (file paths or bundled ids),
  writing a trace CSV and a report JSON per scenario.
- ``report``: consolidate report JSONs into a summary table (CSV plus a
  text table on stdout), rows sorted by verdict then id.
- ``calibrate``: measure the ladder constants and print them as JSON.
- ``validate-solver``: run the bundled solver validation scenario.
- ``check-modulus``: run the bundled modulus suite.

Global flags (accepted before or after the subcommand): ``--strict``
makes any non-passing verdict exit 1; ``--out DIR`` chooses the output
directory; ``--threads K`` runs independent scenarios concurrently.

Exit codes: 0 ok; 1 non-passing verdict under ``--strict``; 2 usage or
config errors; 3 unknown registry ids; 4 solver or fixed-point failures.
With several scenarios the most config-sided error wins (2 over 3 over 4);
all scenarios are validated before any of them runs.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .campanato import calibrate_constants
from .errors import (
    CalibrationError,
    FixedPointError,
    RegistryError,
    RegprobeError,
    ScenarioError,
    SchemaVersionError,
    SolverError,
)
from .scenarios import (
    SCHEMA_VERSION,
    atomic_write_text,
    load_scenario,
    run_scenario,
    sanitize,
)

PASS_VERDICTS = frozenset({"C1_certified", "C11_certified", "pass"})


def _exit_code(exc: RegprobeError) -> int:
    if isinstance(exc, RegistryError):
        return 3
    if isinstance(exc, (SolverError, FixedPointError, CalibrationError)):
        return 4
    return 2


def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--strict", action="store_true", default=argparse.SUPPRESS,
                   help="exit 1 unless every verdict is certified or pass")
    p.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS,
                   help="output directory (default: current directory)")
    p.add_argument("--threads", type=int, metavar="K",
                   default=argparse.SUPPRESS,
                   help="run up to K scenarios concurrently")
    return p


def _build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(
        prog="regprobe",
        description="Scenario runner for pointwise regularity probes.",
        parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", parents=[common],
                           help="execute scenarios and write artifacts")
    run_p.add_argument("scenario", nargs="+",
                       help="scenario file path or bundled scenario id")

    rep_p = sub.add_parser("report", parents=[common],
                           help="summarize report files into one table")
    rep_p.add_argument("path", nargs="+",
                       help="report JSON file or directory containing them")

    cal_p = sub.add_parser("calibrate", parents=[common],
                           help="measure ladder constants on the frozen "
                                "coefficient suite")
    cal_p.add_argument("--lam", type=float, default=0.2,
                       help="scale ratio (default 0.2)")
    cal_p.add_argument("--cells", type=int, default=48,
                       help="solver resolution (default 48)")

    val_p = sub.add_parser("validate-solver", parents=[common],
                           help="run the bundled solver validation scenario")
    val_p.add_argument("--seed", type=int, default=None,
                       help="override the randomized-operator seed")
    val_p.add_argument("--operators", type=int, default=None,
                       help="override the randomized-operator count")

    sub.add_parser("check-modulus", parents=[common],
                   help="run the bundled modulus suite")
    return parser


def _strict(args) -> bool:
    return getattr(args, "strict", False)


def _out_dir(args) -> Path:
    return Path(getattr(args, "out", None) or ".")


def _threads(args) -> int:
    return max(1, getattr(args, "threads", 1))


def _cmd_run(args) -> int:
    docs = [load_scenario(ref) for ref in args.scenario]
    out = _out_dir(args)

    def execute(doc):
        return run_scenario(doc, out)

    n_workers = min(_threads(args), len(docs))
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            reports = list(pool.map(execute, docs))
    else:
        reports = [execute(doc) for doc in docs]

    all_pass = True
    for doc, report in zip(docs, reports):
        eff = Path(doc.get("output_dir", out))
        print(f"{doc['id']}: {report['verdict']} "
              f"({eff / (doc['id'] + '_report.json')})")
        all_pass = all_pass and report["verdict"] in PASS_VERDICTS
    if _strict(args) and not all_pass:
        return 1
    return 0


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, str):
        return value
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _cmd_report(args) -> int:
    paths = []
    for arg in args.path:
        p = Path(arg)
        if p.is_dir():
            paths.extend(sorted(p.glob("*_report.json")))
        elif p.is_file():
            paths.append(p)
        else:
            raise ScenarioError(f"no such file or directory: {arg}")
    if not paths:
        raise ScenarioError(
            "no report files found (expected *_report.json)")

    rows = []
    for p in paths:
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{p}: invalid JSON: {exc.msg}") from exc
        if not isinstance(doc, dict) or doc.get("v") != SCHEMA_VERSION:
            raise SchemaVersionError(
                f"{p}: schema version {doc.get('v')!r} not supported "
                f"(expected {SCHEMA_VERSION})")
        limits = doc.get("limits", {})
        rows.append([doc["scenario_id"], doc["mode"], doc["verdict"],
                     limits.get("final_n"), limits.get("s_last"),
                     limits.get("worst_margin")])
    rows.sort(key=lambda r: (r[2], r[0]))

    header = ["scenario_id", "mode", "verdict", "final_n", "s_last",
              "worst_margin"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join("" if v is None else _fmt(v) for v in row))
    summary_path = _out_dir(args) / "summary.csv"
    atomic_write_text(summary_path, "\n".join(lines) + "\n")

    widths = [max(len(header[i]), max((len(_fmt(r[i])) for r in rows),
                                      default=0))
              for i in range(len(header))]
    print("  ".join(h.ljust(widths[i]) for i, h in enumerate(header)))
    for row in rows:
        print("  ".join(_fmt(v).ljust(widths[i]) for i, v in enumerate(row)))
    print(f"summary written to {summary_path}")

    if _strict(args) and any(r[2] not in PASS_VERDICTS for r in rows):
        return 1
    return 0


def _cmd_calibrate(args) -> int:
    constants = calibrate_constants(lam=args.lam, cells=args.cells)
    text = json.dumps(sanitize(constants), indent=2)
    print(text)
    if getattr(args, "out", None):
        atomic_write_text(Path(args.out) / "calibration.json", text + "\n")
    return 0


def _cmd_bundled(args, name: str, overrides: dict) -> int:
    doc = load_scenario(name)
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    report = run_scenario(doc, _out_dir(args))
    print(f"{doc['id']}: {report['verdict']}")
    for key, value in report["limits"].items():
        print(f"  {key}: {_fmt(sanitize(value))}")
    if _strict(args) and report["verdict"] not in PASS_VERDICTS:
        return 1
    return 0


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else 2
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "report":
            return _cmd_report(args)
        if args.command == "calibrate":
            return _cmd_calibrate(args)
        if args.command == "validate-solver":
            return _cmd_bundled(args, "solver_validation",
                                {"seed": args.seed,
                                 "operators": args.operators})
        return _cmd_bundled(args, "modulus_check", {})
    except RegprobeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
