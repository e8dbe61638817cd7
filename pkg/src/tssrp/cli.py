"""Command-line interface.

Exit codes: 0 finished without alarm, 2 alarm raised, 3 and above errors
(4 config, 5 state, 6 data, 7 protocol, 8 calibration).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import re
import sys
from pathlib import Path

from .baselines import TrasConfig
from .calibration import calibrate_threshold
from .configfile import RunConfig, parse_config, with_threshold
from .errors import ConfigError, DataError, TssrpError
from .runio import RunManifest, build_table, dump_json, load_reports, monitor, rows_to_csv
from .sim import run_experiment
from .verify import run_checks

log = logging.getLogger("tssrp")

EXIT_OK, EXIT_ALARM = 0, 2


def _changes(text: str) -> list[int]:
    try:
        out = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None
    if not out or any(v < 0 for v in out):
        raise argparse.ArgumentTypeError("change counts must be nonnegative")
    return out


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9.]+", "_", text).strip("_")


def _threshold(args, cfg: RunConfig) -> float:
    if args.threshold is not None:
        return args.threshold
    if getattr(args, "calibration", None):
        data = json.loads(Path(args.calibration).read_text())
        if "threshold" not in data:
            raise ConfigError(f"{args.calibration} has no 'threshold' field")
        return float(data["threshold"])
    p = cfg.procedure
    t = p.threshold if isinstance(p, TrasConfig) else p.rule.threshold
    if t == float("inf"):
        raise ConfigError("no threshold: pass --threshold, --calibration, or set rule.threshold")
    return t


def _outdir(path: str | None) -> Path:
    out = Path(path or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_calibrate(args) -> int:
    cfg = parse_config(args.config)
    c = cfg.calibration
    reps = args.reps or c.reps
    seed = args.seed if args.seed is not None else c.seed
    gamma = args.gamma or cfg.scenario.gamma
    options = {"command": "calibrate", "reps": reps, "gamma": gamma, "rel_tol": c.rel_tol, "horizon": c.horizon}
    manifest = RunManifest.create(cfg, args.argv, options, seed)
    rep = calibrate_threshold(
        cfg.procedure, gamma, reps=reps, horizon=c.horizon, rel_tol=c.rel_tol, master_seed=seed,
        source=cfg.scenario.in_control().source(), workers=args.workers,
    )
    out = _outdir(args.out)
    body = rep.to_dict() | {"algorithm": cfg.procedure.algorithm, "manifest": manifest.digest}
    dump_json(body, out / "calibration.json")
    manifest.outputs = [str(out / "calibration.json")]
    manifest.write(out / "manifest_calibrate.json")
    print(f"threshold {rep.threshold!r}  ARL {rep.arl_estimate:.1f} ({rep.std_error:.1f})  censored {rep.censored_count}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = parse_config(args.config)
    threshold = _threshold(args, cfg)
    seed = args.seed if args.seed is not None else cfg.seed
    reps = args.reps or cfg.scenario.replications
    changes = args.changes
    if changes is not None and cfg.scenario.nu is None:
        raise ConfigError("--changes needs a finite scenario.nu; this scenario never changes")
    options = {"command": "simulate", "threshold": threshold, "reps": reps, "changes": changes, "horizon": args.horizon}
    manifest = RunManifest.create(cfg, args.argv, options, seed)
    cfg = with_threshold(cfg, threshold)
    out = _outdir(args.out)
    counts = changes if changes is not None else [None]
    for m in counts:
        scenario = cfg.scenario if m is None else cfg.scenario.with_changes(m)
        if m is not None and cfg.scenario.random_changes is not None:
            scenario = dataclasses.replace(scenario, changed=(), random_changes=m)
        rep = run_experiment(scenario, cfg.procedure, seed, replications=reps, horizon=args.horizon, workers=args.workers)
        stem = f"{_slug(rep.label)}_m{rep.n_changes if rep.n_changes is not None else 'none'}"
        body = rep.to_dict()
        delays = body.pop("delays")
        body["manifest"] = manifest.digest
        dump_json(body, out / f"report_{stem}.json")
        buf = io.StringIO()
        buf.write(f"# manifest {manifest.digest}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n_changes", "delay"])
        w.writerows([rep.n_changes, d] for d in delays)
        (out / f"delays_{stem}.csv").write_text(buf.getvalue())
        manifest.outputs += [str(out / f"report_{stem}.json"), str(out / f"delays_{stem}.csv")]
        print(f"{rep.label} changes={rep.n_changes}: mean delay {rep.mean_delay:.2f} ({rep.stderr:.2f})")
    manifest.write(out / "manifest_simulate.json")
    return EXIT_OK


def cmd_monitor(args) -> int:
    cfg = parse_config(args.config)
    threshold = _threshold(args, cfg)
    options = {"command": "monitor", "threshold": threshold, "format": args.format}
    manifest = RunManifest.create(cfg, args.argv, options, cfg.seed)
    src = sys.stdin if args.input in (None, "-") else open(args.input)
    layout = None
    if args.layout_out == "-":
        layout = sys.stderr
    elif args.layout_out:
        layout = open(args.layout_out, "w")
    trace = open(args.trace, "w", newline="") if args.trace else None
    try:
        result = monitor(src, cfg, threshold, fmt=args.format, layout_sink=layout, trace_sink=trace, manifest=manifest.digest)
    finally:
        for f in (src, layout, trace):
            if f not in (None, sys.stdin, sys.stderr):
                f.close()
    text = dump_json(result.report)
    if args.alarm_out:
        Path(args.alarm_out).write_text(text)
    sys.stdout.write(text)
    return EXIT_ALARM if result.alarm else EXIT_OK


def cmd_report(args) -> int:
    reports = load_reports([Path(p) for p in args.results])
    table, rows = build_table(reports)
    sys.stdout.write(table)
    if args.csv:
        Path(args.csv).write_text(rows_to_csv(rows))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_checks()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else TssrpError.exit_code


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tssrp", description="Change detection over many streams when only a few are observed per step."
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="find the threshold meeting the ARL target")
    p.add_argument("config")
    p.add_argument("--gamma", type=float, help="ARL target (default: scenario.gamma)")
    p.add_argument("--reps", type=int, help="in-control replications (default: calibration.reps)")
    p.add_argument("--seed", type=int, help="master seed (default: calibration.seed)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="output directory (default: .)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", help="estimate detection delays by Monte Carlo")
    p.add_argument("config")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--threshold", type=float)
    g.add_argument("--calibration", help="calibration.json written by 'calibrate'")
    p.add_argument("--changes", type=_changes, help="comma-separated changed-stream counts, e.g. 1,3,5,8,10")
    p.add_argument("--reps", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--seed", type=int, help="master seed (default: scenario.seed)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="output directory (default: .)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("monitor", help="run the detector on live records")
    p.add_argument("config")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--threshold", type=float)
    g.add_argument("--calibration")
    p.add_argument("--input", help="record file (default: stdin)")
    p.add_argument("--format", choices=("ndjson", "csv"), default="ndjson")
    p.add_argument("--layout-out", help="where layout requests go; '-' for stderr")
    p.add_argument("--alarm-out", help="also write the final report here")
    p.add_argument("--trace", help="CSV trace of t, statistic, threshold, layout")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("report", help="tabulate experiment reports")
    p.add_argument("results", nargs="+", help="report files or directories")
    p.add_argument("--csv", help="write the long-format CSV here")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify", help="run the oracle self-checks")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = ["tssrp", *argv]
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return exc.exit_code
    except TssrpError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
