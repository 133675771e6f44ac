"""Command-line harness: ``strategic-select <command> [options]``.

Each experiment command writes ``<out>/<command>.csv``, a matching SVG
chart and an entry in ``<out>/manifest.json``. Outputs depend only on the
configuration, the seed and the command's flags; the worker count never
changes a byte.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import platform
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from . import __version__
from . import experiments as ex
from .estimators import EstimationError
from .model import Config, ConfigError, DataFormatError, config_hash, default_config, load_config
from .protocol import ProtocolError
from .simulator import SimulationError
from .svg import ChartError, Series, bar_chart, line_chart

__all__ = ["main", "CliError", "EXIT_CODES", "write_csv", "read_csv", "plot_csv", "detect_schema"]

log = logging.getLogger(__name__)

EXIT_CODES = {
    "internal": 1,
    "usage": 2,
    "config": 3,
    "input": 4,
    "estimation": 5,
    "simulation": 6,
    "io": 7,
}

# environments each command needs when no config file is given
DEFAULT_N = {"table1": 1, "table2": 2, "estimation-error": 1, "rho-sweep": 1,
             "coalition": 3, "sensitivity": 1, "welfare": 1}


class CliError(Exception):
    """Failure with a machine-readable category from :data:`EXIT_CODES`."""

    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _category(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, (DataFormatError, ChartError)):
        return "input"
    if isinstance(exc, (EstimationError, ex.ExperimentError)):
        return "estimation"
    if isinstance(exc, (SimulationError, ProtocolError)):
        return "simulation"
    if isinstance(exc, OSError):
        return "io"
    return "internal"


# ---------------------------------------------------------------- CSV I/O

def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, rows: Sequence[dict]) -> None:
    """Write dict rows; columns follow first appearance across rows."""
    if not rows:
        raise CliError("internal", f"no rows to write to {path}")
    columns: list[str] = []
    for row in rows:
        columns += [k for k in row if k not in columns]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row.get(c, "")) for c in columns])
    path.write_text(buf.getvalue())


def read_csv(path) -> list[dict]:
    """Read a results CSV; raises DataFormatError when empty."""
    text = Path(path).read_text()
    rows = list(csv.DictReader(io.StringIO(text)))
    if not text.strip() or not rows:
        raise DataFormatError(f"{path}: empty input, no result rows")
    return rows


# ---------------------------------------------------------------- charts

SCHEMAS = {
    "table2": {"theta1", "theta2", "utility", "stderr"},
    "table1": {"candidate", "utility", "stderr"},
    "estimation-error": {"scenario", "dm", "method", "T", "quantity", "mean", "ci_low", "ci_high"},
    "rho-sweep": {"method", "rho", "mean", "ci_low", "ci_high"},
    "coalition": {"scenario", "dm", "mean", "ci_low", "ci_high"},
    "sensitivity": {"knob", "alpha", "metric", "mean", "ci_low", "ci_high"},
    "welfare": {"env", "cosine", "lambda"},
}


def detect_schema(columns: Sequence[str], expected: str | None = None) -> str:
    """Name of the results schema matching ``columns``.

    With ``expected`` the check is strict and the error lists the missing
    columns; otherwise the first schema fully present wins.
    """
    cols = set(columns)
    if expected is not None:
        missing = sorted(SCHEMAS[expected] - cols)
        if missing:
            raise DataFormatError(f"not a {expected} results file; missing columns: {', '.join(missing)}")
        return expected
    for name, need in SCHEMAS.items():
        if need <= cols:
            return name
    best = min(SCHEMAS, key=lambda k: len(SCHEMAS[k] - cols))
    raise DataFormatError(
        f"unrecognised results schema; closest is {best}, missing columns: {', '.join(sorted(SCHEMAS[best] - cols))}"
    )


def _num(v: str) -> float:
    return float(v) if v not in ("", None) else math.nan


def _ordered(values) -> list:
    seen = []
    for v in values:
        if v not in seen:
            seen.append(v)
    return seen


def _band(rows, xkey: str) -> tuple:
    rows = sorted(rows, key=lambda r: _num(r[xkey]))
    return ([_num(r[xkey]) for r in rows], [_num(r["mean"]) for r in rows],
            [_num(r["ci_low"]) for r in rows], [_num(r["ci_high"]) for r in rows])


def _se_bars(rows, key: str = "utility"):
    y = [_num(r[key]) for r in rows]
    se = [_num(r["stderr"]) for r in rows]
    return y, [a - b for a, b in zip(y, se)], [a + b for a, b in zip(y, se)]


def render(schema: str, rows: list[dict]) -> str:
    """SVG text for rows of a known schema."""
    if schema == "table1":
        y, lo, hi = _se_bars(rows)
        return bar_chart([r["candidate"] for r in rows], [Series("utility", [], y, lo, hi)],
                         title="Measured utility by candidate", ylabel="utility")
    if schema == "table2":
        cats = _ordered(r["theta2"] for r in rows)
        series = []
        for a in _ordered(r["theta1"] for r in rows):
            sub = [next(r for r in rows if r["theta1"] == a and r["theta2"] == b) for b in cats]
            y, lo, hi = _se_bars(sub)
            series.append(Series(f"theta1={a}", [], y, lo, hi))
        return bar_chart([f"theta2={c}" for c in cats], series, title="Utility of DM 1", ylabel="utility")
    if schema == "estimation-error":
        sub = [r for r in rows if r["quantity"] == "error"]
        series = []
        for key in _ordered((r["scenario"], r["dm"], r["method"]) for r in sub):
            x, y, lo, hi = _band([r for r in sub if (r["scenario"], r["dm"], r["method"]) == key], "T")
            series.append(Series(f"{key[0]} dm{key[1]} {key[2]}", x, y, lo, hi))
        return line_chart(series, title="Estimation error", xlabel="rounds T", ylabel="error", log_y=True)
    if schema == "rho-sweep":
        series = []
        for method in _ordered(r["method"] for r in rows):
            x, y, lo, hi = _band([r for r in rows if r["method"] == method], "rho")
            series.append(Series(method, x, y, lo, hi))
        return line_chart(series, title="Estimation error versus rho", xlabel="rho", ylabel="error", log_y=True)
    if schema == "coalition":
        cats = _ordered(r["dm"] for r in rows)
        series = []
        for sc in _ordered(r["scenario"] for r in rows):
            sub = [next(r for r in rows if r["scenario"] == sc and r["dm"] == d) for d in cats]
            series.append(Series(sc, [], [_num(r["mean"]) for r in sub], [_num(r["ci_low"]) for r in sub],
                                 [_num(r["ci_high"]) for r in sub]))
        return bar_chart([f"DM {d}" for d in cats], series, title="MSLR error by cooperation", ylabel="error")
    if schema == "sensitivity":
        series = []
        for key in _ordered((r["knob"], r["metric"]) for r in rows):
            x, y, lo, hi = _band([r for r in rows if (r["knob"], r["metric"]) == key], "alpha")
            series.append(Series(f"{key[0]} {key[1]}", x, y, lo, hi))
        return line_chart(series, title="Sensitivity", xlabel="alpha", ylabel="value")
    if schema == "welfare":
        bound_cols = [c for c in rows[0] if c.startswith("bound_M")]
        if not bound_cols:
            raise DataFormatError("welfare results have no bound_M* columns")
        series = [Series(f"env {r['env']}", [], [_num(r[c]) for c in bound_cols]) for r in rows]
        return bar_chart([c[len("bound_"):] for c in bound_cols], series, title="Reduction bound",
                         ylabel="bound")
    raise DataFormatError(f"no chart for schema {schema!r}")


def plot_csv(csv_path, out_path, expected: str | None = None) -> str:
    """Render a results CSV to an SVG file; returns the detected schema."""
    rows = read_csv(csv_path)
    schema = detect_schema(list(rows[0].keys()), expected)
    Path(out_path).write_text(render(schema, rows))
    return schema


# ---------------------------------------------------------------- commands

def _floats(text: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"cannot parse number list {text!r}") from exc
    if not vals or not all(math.isfinite(v) for v in vals):
        raise argparse.ArgumentTypeError(f"expected a nonempty list of finite numbers, got {text!r}")
    return vals


def _ints(text: str) -> tuple:
    vals = _floats(text)
    if any(v != int(v) for v in vals):
        raise argparse.ArgumentTypeError(f"expected integers in {text!r}")
    return tuple(int(v) for v in vals)


def _threads(arg: int | None) -> int:
    env = os.environ.get("SS_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise CliError("usage", f"SS_THREADS must be an integer, got {env!r}") from exc
    else:
        n = 1 if arg is None else arg
    if n < 1:
        raise CliError("usage", "thread count must be at least 1")
    return n


def _flags(args) -> dict:
    out = {}
    for key in ("replicates", "t_grid", "rho_grid", "alpha_grid"):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = list(v) if isinstance(v, tuple) else v
    return out


def _run(command: str, config: Config, args, threads: int) -> dict:
    kw = {"replicates": args.replicates} if args.replicates is not None else {}
    if command == "table1":
        return ex.run_table1(config, args.seed, threads=threads, **kw)
    if command == "table2":
        return ex.run_table2(config, args.seed, threads=threads, **kw)
    if command == "estimation-error":
        return ex.run_estimation_error(config, args.seed, t_grid=args.t_grid, threads=threads, **kw)
    if command == "rho-sweep":
        return ex.run_rho_sweep(config, args.seed, rho_grid=args.rho_grid, threads=threads, **kw)
    if command == "coalition":
        return ex.run_coalition(config, args.seed, threads=threads, **kw)
    if command == "sensitivity":
        return ex.run_sensitivity(config, args.seed, alpha_grid=args.alpha_grid, threads=threads, **kw)
    if command == "welfare":
        return ex.run_welfare(config, args.seed, threads=threads)
    raise CliError("usage", f"unknown command {command!r}")


def _update_manifest(out: Path, command: str, entry: dict) -> None:
    path = out / "manifest.json"
    manifest = {}
    if path.exists():
        try:
            manifest = json.loads(path.read_text())
        except json.JSONDecodeError:
            manifest = {}
    manifest.setdefault("commands", {})[command] = entry
    manifest["versions"] = {
        "strategic_select": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_command(command: str, args) -> tuple[Path, dict]:
    """Execute one experiment command and write its outputs.

    Returns the CSV path and the raw experiment result.
    """
    config = load_config(args.config) if args.config else default_config(DEFAULT_N[command])
    threads = _threads(args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = _run(command, config, args, threads)
    csv_path = out / f"{command}.csv"
    write_csv(csv_path, result["rows"])
    if command == "welfare":
        (out / "welfare.json").write_text(
            json.dumps([r.to_dict() for r in result["reports"]], indent=2, sort_keys=True) + "\n")
    plot_csv(csv_path, out / f"{command}.svg", expected=command)
    _update_manifest(out, command, {
        "config_hash": config_hash(config),
        "config_path": str(args.config) if args.config else None,
        "seed": args.seed,
        "flags": _flags(args),
        "outputs": sorted(p.name for p in out.glob(f"{command}.*")),
    })
    return csv_path, result


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="strategic-select",
                                     description="Strategic selection experiments with multiple decision makers.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, help="YAML or JSON configuration (defaults built in)")
        p.add_argument("--seed", type=int, default=0, help="master seed (nonnegative)")
        p.add_argument("--out", type=Path, default=Path("results"), help="output directory")
        p.add_argument("--replicates", type=int, help="override experiment.replicates")
        p.add_argument("--threads", type=int, help="worker threads (SS_THREADS overrides)")

    for name, help_ in (("table1", "utility of each candidate, one DM"),
                        ("table2", "utility grid of DM 1 against DM 2"),
                        ("coalition", "MSLR error under partial versus full cooperation"),
                        ("welfare", "regulator report per environment")):
        common(sub.add_parser(name, help=help_))
    p = sub.add_parser("estimation-error", help="estimation error versus rounds")
    common(p)
    p.add_argument("--t-grid", type=_ints, help="round counts, e.g. '20,40,60,80,100'")
    p = sub.add_parser("rho-sweep", help="estimation error versus admitted fraction")
    common(p)
    p.add_argument("--rho-grid", type=_floats, help="admitted fractions, e.g. '0.25,0.5,0.75,1'")
    p = sub.add_parser("sensitivity", help="utility gaps and errors versus model misspecification")
    common(p)
    p.add_argument("--alpha-grid", type=_floats, help="knob values in [0, 1]")
    p = sub.add_parser("plot", help="render a results CSV as SVG")
    p.add_argument("results", type=Path, help="results CSV written by another command")
    p.add_argument("--output", type=Path, help="SVG path (defaults to the CSV path with .svg)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plot":
            target = args.output or args.results.with_suffix(".svg")
            schema = plot_csv(args.results, target)
            print(f"{schema} chart written to {target}")
            return 0
        if args.seed < 0:
            raise CliError("usage", "seed must be nonnegative")
        if args.replicates is not None and args.replicates < 1:
            raise CliError("usage", "replicates must be at least 1")
        path, result = run_command(args.command, args)
        if args.command == "welfare":
            for row in result["rows"]:
                verdict = "PASS" if row["regulation_ok"] else "FAIL"
                print(f"env {row['env']}: regulation {verdict} (cosine {row['cosine']:.4f}, "
                      f"lambda {row['lambda']:.4g}, improved chance {'yes' if row['improved_chance_ok'] else 'no'})")
        print(f"{args.command} results written to {path}")
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit category
        category = _category(exc)
        if category == "internal":
            log.exception("unexpected failure")
        print(f"error: {category}: {exc}", file=sys.stderr)
        return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
