"""Command-line entry point: ``fp8probe {gen-config,track,probe,dispatch,report}``.

Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import PipelineConfig
from .errors import ConfigError, Fp8ProbeError, NotPositiveDefinite
from .pipeline import cmd_dispatch, cmd_probe, cmd_report, cmd_track
from .probe import ThroughputTable

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("fp8probe")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default; 2 means bad data here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _load_table(path) -> ThroughputTable | None:
    if path is None:
        return None
    try:
        return ThroughputTable.from_csv(path)
    except (ValueError, KeyError) as exc:
        raise _DataError(f"bad throughput table {path}: {exc}") from None


class _DataError(Exception):
    pass


def _gen_config(args) -> int:
    text = PipelineConfig().dump()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _track(args) -> int:
    cfg = _load_config(args)
    s = cmd_track(cfg, args.out, args.iterations)
    acts = sorted(set(s.activations.values()))
    print(f"tracked {len(s.activations)} layers over {s.iterations} iterations: "
          f"{acts[0] if acts else 0} activations per layer, {s.snapshot_writes} snapshot writes")
    return EXIT_OK


def _probe(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out) if args.out else cfg.path("report")
    report = cmd_probe(cfg, args.snapshots, out, args.distribution, args.samples,
                       _load_table(args.throughput_table), True if args.compare else None)
    print(f"wrote {out} ({len(report.results)} rows)")
    return EXIT_OK


def _dispatch(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out) if args.out else cfg.path("plan")
    plan = cmd_dispatch(cfg, args.report, out, _load_table(args.throughput_table))
    chosen = sum(not e.is_baseline for e in plan.entries.values())
    print(f"wrote {out} ({chosen}/{len(plan.entries)} GEMMs on a low-precision recipe)")
    return EXIT_OK


def _report(args) -> int:
    sys.stdout.write(cmd_report(args.path, args.out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fp8probe", description="Probe FP8 GEMM error on learned distributions and build a dispatch plan.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-config", help="print the default config with every value spelled out")
    g.add_argument("--out", help="write to this file instead of stdout")
    g.set_defaults(func=_gen_config)

    def common(sp):
        sp.add_argument("--config", help="JSON config file (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="override the config seed")

    t = sub.add_parser("track", help="run the online trackers on synthetic streams and write snapshots")
    common(t)
    t.add_argument("--iterations", type=int, help="override tracking.iterations")
    t.add_argument("--out", help="snapshot directory")
    t.set_defaults(func=_track)

    pr = sub.add_parser("probe", help="sample from snapshots and measure per-candidate error and throughput")
    common(pr)
    pr.add_argument("--snapshots", help="snapshot directory")
    pr.add_argument("--samples", type=int, help="sampled input/weight pairs per layer")
    pr.add_argument("--distribution", choices=("learned", "normal"))
    pr.add_argument("--compare", action="store_true", help="add a normal-vs-learned comparison section")
    pr.add_argument("--throughput-table", help="CSV of measured throughput overriding local timing")
    pr.add_argument("--out", help="report path")
    pr.set_defaults(func=_probe)

    d = sub.add_parser("dispatch", help="select a recipe per layer and direction")
    common(d)
    d.add_argument("--report", help="report path")
    d.add_argument("--throughput-table", help="CSV of measured throughput overriding the report's")
    d.add_argument("--out", help="plan path")
    d.set_defaults(func=_dispatch)

    r = sub.add_parser("report", help="render a report or plan as text; optional CSV export")
    r.add_argument("path")
    r.add_argument("--out", help="write CSV here")
    r.set_defaults(func=_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help exits 0, usage errors exit 1
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "samples", None) is not None and args.samples < 1:
        print("fp8probe: error: --samples must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"fp8probe: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NotPositiveDefinite as exc:
        print(f"fp8probe: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (Fp8ProbeError, _DataError, OSError) as exc:
        print(f"fp8probe: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
