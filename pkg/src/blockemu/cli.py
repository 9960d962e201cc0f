"""Command-line entry point.

    blockemu calibrate --difficulties 1.0:3.2 --samples 30 --out map.csv
    blockemu select-difficulty --map map.csv --target-interval 60s
    blockemu run --nodes 100 --txns 1000 --mode replay --map map.csv --seed 7 --out run.csv --plot
    blockemu report run.csv --map map.csv

Exit codes: 0 success, 1 internal error, 2 usage, 3 missing prerequisite
(no map, a difficulty the map does not cover, an empty map).
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .calibration import (DEFAULT_BUDGET_S, DEFAULT_SAMPLER, SAMPLERS, CalibrationMiss,
                          DifficultyTimeMap, MapFormatError, calibrate, difficulties_near,
                          expand_difficulty_range, load_map, measure_hash_rate, save_map,
                          select_difficulty)
from .consensus import make_provider, provider_names
from .engine import ARRIVALS, ConfigError, Emulation, RunMetrics, SimConfig
from .ledger import persist_ledger
from .netqueue import LatencyModel
from .puzzle import Difficulty, PuzzleError, parse_difficulty

log = logging.getLogger("blockemu")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_PREREQ = 3

MAP_ENV = "BLOCKEMU_MAP"
REPORT_HEADER = "# blockemu-report v1"
ROW_COLUMNS = ("sim_ms", "blocks_committed", "txns_committed", "rss_bytes", "wall_ms")

_DURATION_RE = re.compile(r"^\s*((?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(ms|s|m)?\s*$")
_UNIT_MS = {"ms": 1.0, "s": 1000.0, "m": 60_000.0, None: 1.0}


class UsageError(Exception):
    pass


class Prerequisite(Exception):
    pass


def parse_duration_ms(text: str) -> float:
    """``"60s"`` -> 60000.0.  Units are ms, s or m; a bare number is milliseconds."""
    m = _DURATION_RE.match(text)
    if not m:
        raise argparse.ArgumentTypeError(f"malformed duration {text!r} (use e.g. 500ms, 60s, 2m)")
    value = float(m.group(1)) * _UNIT_MS[m.group(2)]
    if not math.isfinite(value) or value <= 0:
        raise argparse.ArgumentTypeError(f"duration must be positive: {text!r}")
    return value


def _difficulty_arg(text: str) -> Difficulty:
    try:
        return parse_difficulty(text)
    except PuzzleError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


# -- report -------------------------------------------------------------------

@dataclass
class RunReport:
    config: dict[str, str]
    metrics: RunMetrics
    rows: list[tuple] = field(default_factory=list)


def _config_echo(cfg: SimConfig, consensus: str) -> dict[str, str]:
    lat = cfg.latency
    return {
        "nodes": str(cfg.node_count), "txns": str(cfg.total_transactions),
        "difficulty": str(cfg.difficulty), "mode": cfg.mode, "consensus": consensus,
        "seed": str(cfg.seed), "block_size": str(cfg.block_size_txns),
        "txn_rate": repr(cfg.txn_rate), "arrivals": cfg.arrivals, "sampler": cfg.sampler,
        "latency_mean_ms": repr(lat.mean_ms), "latency_stddev_ms": repr(lat.stddev_ms),
        "latency_floor_ms": repr(lat.floor_ms),
    }


def _kv(d: dict) -> str:
    return " ".join(f"{k}={v}" for k, v in d.items())


def _num(x) -> str:
    if x is None:
        return ""
    return repr(float(x)) if isinstance(x, float) else str(x)


def write_report(report: RunReport, path: str | os.PathLike) -> Path:
    """CSV with ``#`` header lines: config, deterministic results, then host-dependent results."""
    m = report.metrics
    det = {k: v for k, v in m.deterministic_view().items() if k != "rows"}
    host = {k: getattr(m, k) for k in RunMetrics.HOST_FIELDS}
    lines = [REPORT_HEADER,
             "# config " + _kv(report.config),
             "# result " + _kv({k: _num(v) for k, v in det.items()}),
             "# host " + _kv({k: _num(v) for k, v in host.items()})]
    if any(r[3] is None for r in report.rows):
        lines.append("# note rss_bytes unavailable on this platform; column left empty")
    lines.append(",".join(ROW_COLUMNS))
    for r in report.rows:
        lines.append(",".join(_num(x) for x in r))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_report(path: str | os.PathLike) -> RunReport:
    config: dict[str, str] = {}
    values: dict[str, str] = {}
    rows = []
    with open(path, encoding="utf-8") as f:
        text = f.read().splitlines()
    if not text or text[0] != REPORT_HEADER:
        raise ValueError(f"{path}: not a blockemu report")
    for lineno, line in enumerate(text[1:], start=2):
        if line.startswith("#"):
            kind, _, rest = line[1:].strip().partition(" ")
            pairs = dict(p.split("=", 1) for p in rest.split() if "=" in p)
            if kind == "config":
                config.update(pairs)
            elif kind in ("result", "host"):
                values.update(pairs)
            continue
        if line == ",".join(ROW_COLUMNS) or not line:
            continue
        parts = line.split(",")
        if len(parts) != len(ROW_COLUMNS):
            raise ValueError(f"{path}:{lineno}: expected {len(ROW_COLUMNS)} columns")
        rows.append((float(parts[0]), int(parts[1]), int(parts[2]),
                     int(parts[3]) if parts[3] else None, float(parts[4])))
    m = RunMetrics()
    for k, v in values.items():
        if hasattr(m, k) and k != "rows":
            cur = getattr(RunMetrics, k, None)
            setattr(m, k, None if v == "" else (float(v) if isinstance(cur, float) else int(float(v))))
    m.rows = rows
    return RunReport(config, m, rows)


# -- subcommands --------------------------------------------------------------

def _map_path(args) -> str | None:
    return args.map or os.environ.get(MAP_ENV) or None


def _load_map_arg(args) -> DifficultyTimeMap:
    path = _map_path(args)
    if not path:
        raise Prerequisite(f"no difficulty-time map: pass --map or set {MAP_ENV}; "
                           "create one with `blockemu calibrate`")
    if not os.path.exists(path):
        raise Prerequisite(f"map file {path} does not exist; create it with `blockemu calibrate`")
    try:
        return load_map(path)
    except MapFormatError as e:
        raise Prerequisite(f"{path}: {e}") from None


def cmd_calibrate(args) -> int:
    if args.difficulties is None and args.near is None:
        raise UsageError("give --difficulties and/or --near")
    diffs: list[Difficulty] = []
    if args.difficulties is not None:
        try:
            diffs += expand_difficulty_range(args.difficulties)
        except PuzzleError as e:
            raise UsageError(str(e)) from None
    if args.near is not None:
        rate = measure_hash_rate()
        near = difficulties_near(args.near, rate, count=args.near_count)
        log.info("host hashes about %.0f/s; candidates near %.0f ms: %s",
                 rate, args.near, ", ".join(map(str, near)))
        diffs += near
    diffs = list(dict.fromkeys(diffs))
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    m = calibrate(diffs, args.samples, seed=args.seed, budget_s=args.budget_s)
    if not m.entries:
        print(f"error: every difficulty exceeded the {args.budget_s} s budget; "
              "raise --budget-s or pick easier difficulties", file=sys.stderr)
        return EXIT_INTERNAL
    save_map(m, args.out)
    for st in m:
        print(f"{st.difficulty}\t{st.mean_ms:.3f} ms\t(sd {st.stddev_ms:.3f}, n={st.samples})")
    if args.plot:
        from .plots import plot_difficulty_map
        for p in plot_difficulty_map(m, Path(args.out)):
            print(f"wrote {p}")
    return EXIT_OK


def cmd_select_difficulty(args) -> int:
    m = _load_map_arg(args)
    if not m.entries:
        raise Prerequisite("difficulty-time map is empty; run `blockemu calibrate` first")
    d = select_difficulty(m, args.target_interval)
    st = m.lookup(d)
    print(f"{d} {st.mean_ms!r}")
    ratio = st.mean_ms / args.target_interval
    if not 0.5 <= ratio <= 2.0:
        print(f"warning: closest calibrated mean is {ratio:.2f}x the target; calibrate more difficulties",
              file=sys.stderr)
    return EXIT_OK


def build_config(args) -> SimConfig:
    try:
        latency = LatencyModel(args.latency_mean_ms, args.latency_stddev_ms, args.latency_floor_ms)
    except ValueError as e:
        raise UsageError(str(e)) from None
    cfg = SimConfig(node_count=args.nodes, total_transactions=args.txns, difficulty=args.difficulty,
                    mode=args.mode, seed=args.seed, block_size_txns=args.block_size,
                    latency=latency, txn_rate=args.txn_rate, arrivals=args.arrivals,
                    sampler=args.sampler)
    try:
        cfg.validate()
    except ConfigError as e:
        raise UsageError(str(e)) from None
    return cfg


def cmd_run(args) -> int:
    cfg = build_config(args)
    consensus = args.consensus or ("nakamoto-replay" if cfg.mode == "replay" else "nakamoto-real")
    time_map = None
    if consensus == "nakamoto-replay" or (args.consensus is None and cfg.mode == "replay"):
        time_map = _load_map_arg(args)
        if cfg.difficulty not in time_map:
            raise CalibrationMiss(cfg.difficulty)
    try:
        kwargs = {"time_map": time_map, "sampler": cfg.sampler} if consensus == "nakamoto-replay" else {}
        provider = make_provider(consensus, **kwargs)
    except KeyError as e:
        raise UsageError(e.args[0]) from None
    emu = Emulation(cfg, provider, time_map)
    metrics = emu.run()
    report = RunReport(_config_echo(cfg, consensus), metrics, metrics.rows)
    if args.ledger_dir:
        os.makedirs(args.ledger_dir, exist_ok=True)
        for node in emu.nodes:
            persist_ledger(node.store, node.node_id, args.ledger_dir)
    if args.out:
        write_report(report, args.out)
    print(f"committed {metrics.blocks_committed} blocks / {metrics.txns_committed} txns "
          f"in {metrics.simulated_ms / 1000.0:.1f} s simulated, {metrics.wall_clock_ms / 1000.0:.2f} s wall; "
          f"forks {metrics.forks_observed}, stale {metrics.stale_work}")
    if args.plot:
        if not args.out:
            raise UsageError("--plot needs --out (figures are written next to the report)")
        from .plots import plot_run_report
        for p in plot_run_report(report, Path(args.out), time_map):
            print(f"wrote {p}")
    return EXIT_OK


def cmd_report(args) -> int:
    if not os.path.exists(args.report):
        raise Prerequisite(f"report {args.report} does not exist; produce it with `blockemu run --out`")
    report = read_report(args.report)
    time_map = _load_map_arg(args) if _map_path(args) else None
    from .plots import plot_difficulty_map, plot_run_report
    base = Path(args.out_dir) / Path(args.report).name if args.out_dir else Path(args.report)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
    written = plot_run_report(report, base, time_map)
    if time_map is not None and time_map.entries:
        written += plot_difficulty_map(time_map, base)
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blockemu", description="Emulate a proof-of-work blockchain on one host.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="measure solve times and write a difficulty-time map")
    c.add_argument("--difficulties", help='range "1.0:3.2" (M runs over 0..2 for each L) or list "1.0,2.3"')
    c.add_argument("--near", type=parse_duration_ms, metavar="DURATION",
                   help="also calibrate the difficulties predicted to solve closest to DURATION")
    c.add_argument("--near-count", type=int, default=3)
    c.add_argument("--samples", type=int, default=30)
    c.add_argument("--budget-s", type=float, default=DEFAULT_BUDGET_S,
                   help="per-difficulty time budget; entries over budget are left out")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.add_argument("--plot", action="store_true", help="render the map next to --out")
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("select-difficulty", help="pick the calibrated difficulty closest to a block interval")
    s.add_argument("--map")
    s.add_argument("--target-interval", type=parse_duration_ms, required=True, metavar="DURATION")
    s.add_argument("--seed", type=int, default=0, help="accepted for symmetry; selection is deterministic")
    s.add_argument("--out", help="unused")
    s.set_defaults(func=cmd_select_difficulty)

    r = sub.add_parser("run", help="run an emulation and write a CSV report")
    r.add_argument("--nodes", type=int, default=100)
    r.add_argument("--txns", type=int, default=1000)
    r.add_argument("--difficulty", type=_difficulty_arg, default=Difficulty(1, 0))
    r.add_argument("--mode", choices=("real", "replay"), default="replay")
    r.add_argument("--consensus", help=f"provider name ({', '.join(provider_names())})")
    r.add_argument("--map")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", help="CSV report path")
    r.add_argument("--block-size", type=int, default=100)
    r.add_argument("--txn-rate", type=float, default=10.0, help="transactions per simulated second")
    r.add_argument("--arrivals", choices=ARRIVALS, default="uniform")
    r.add_argument("--sampler", choices=tuple(SAMPLERS), default=DEFAULT_SAMPLER)
    r.add_argument("--latency-mean-ms", type=float, default=100.0)
    r.add_argument("--latency-stddev-ms", type=float, default=20.0)
    r.add_argument("--latency-floor-ms", type=float, default=1.0)
    r.add_argument("--ledger-dir", help="write every node's ledger here")
    r.add_argument("--plot", action="store_true", help="render figures next to --out")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("report", help="render figures from a run report")
    g.add_argument("report")
    g.add_argument("--map", help="also plot this map and mark the run's difficulty")
    g.add_argument("--out-dir")
    g.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"blockemu {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (Prerequisite, CalibrationMiss) as e:
        print(f"blockemu {args.command}: {e}", file=sys.stderr)
        return EXIT_PREREQ
    except KeyboardInterrupt:
        return 130
    except Exception as e:
        log.debug("internal error", exc_info=True)
        print(f"blockemu {args.command}: internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
