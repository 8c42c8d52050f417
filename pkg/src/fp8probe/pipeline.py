"""track -> probe -> dispatch -> report, as plain functions over files."""

from __future__ import annotations

import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .config import PipelineConfig
from .dispatch import DispatchPlan, apply_throughput_table, build_plan
from .errors import ConfigError, CorruptSnapshot
from .gemm import DIRECTIONS
from .persist import read_document
from .probe import ComparisonRow, ProbeReport, ThroughputTable, bench_fn, compare_distributions, distribution_table, geomean_mere, probe_layer
from .sampling import Rng, standard_input_stats
from .synth import LayerStream
from .tracking import InputStats, snapshot_load, snapshot_save, weight_init, weight_update

log = logging.getLogger(__name__)


def snapshot_paths(snap_dir: Path, layer: str) -> tuple[Path, Path]:
    return snap_dir / f"{layer}.input.json", snap_dir / f"{layer}.weight.json"


@dataclass
class TrackSummary:
    iterations: int
    activations: dict[str, int] = field(default_factory=dict)
    snapshot_writes: int = 0
    files: list[str] = field(default_factory=list)


def cmd_track(cfg: PipelineConfig, out_dir: Path | None = None, iterations: int | None = None) -> TrackSummary:
    """Run the online trackers over each layer's synthetic stream.

    Trackers update on every ``activate_every``-th step (1-based); on every
    ``snapshot_every``-th step a copy of all tracker states is handed to a
    background writer while tracking continues.
    """
    out_dir = Path(out_dir) if out_dir is not None else cfg.path("snapshots")
    iterations = cfg.tracking.iterations if iterations is None else iterations
    sched = cfg.schedule
    root = Rng(cfg.seed)
    streams = {
        lc.spec.name: LayerStream(lc.distribution, lc.spec.batch, lc.spec.in_features, lc.spec.out_features,
                                  root.spawn(lc.spec.name).spawn("data"))
        for lc in cfg.layers
    }
    in_stats = {lc.spec.name: InputStats.empty(lc.spec.in_features) for lc in cfg.layers}
    w_stats: dict = {name: None for name in streams}
    summary = TrackSummary(iterations, {name: 0 for name in streams})

    pending = []
    with ThreadPoolExecutor(max_workers=1, thread_name_prefix="snapshot") as writer:
        for step in range(sched.activate_every, iterations + 1, sched.activate_every):
            for name, stream in streams.items():
                in_stats[name] = _input_step(in_stats[name], stream.inputs(step))
                w = stream.weight(step)
                ws = w_stats[name]
                w_stats[name] = (
                    weight_init(w, cfg.tracking.momentum, cfg.tracking.epsilon_rel) if ws is None else weight_update(ws, w)
                )
                summary.activations[name] += 1
            if sched.is_snapshot(step):
                frozen = copy.deepcopy((in_stats, w_stats))
                pending.append(writer.submit(_write_snapshots, out_dir, frozen, step))
                summary.snapshot_writes += 1
        for fut in pending:
            summary.files.extend(fut.result())
    if summary.snapshot_writes == 0:
        log.warning("no snapshot written: %d iterations < snapshot_every=%d", iterations, sched.snapshot_every)
    return summary


def _input_step(stats: InputStats, batch) -> InputStats:
    from .tracking import input_update

    return input_update(stats, batch)


def _write_snapshots(out_dir: Path, frozen, step: int) -> list[str]:
    in_stats, w_stats = frozen
    written = []
    for name in in_stats:
        p_in, p_w = snapshot_paths(out_dir, name)
        snapshot_save(in_stats[name], p_in, layer=name, step=step)
        snapshot_save(w_stats[name], p_w, layer=name, step=step)
        written += [str(p_in), str(p_w)]
    return written


def cmd_probe(
    cfg: PipelineConfig,
    snap_dir: Path | None = None,
    out: Path | None = None,
    distribution: str | None = None,
    samples: int | None = None,
    throughput_table: ThroughputTable | None = None,
    compare: bool | None = None,
) -> ProbeReport:
    """Probe every layer from its snapshots and write the report."""
    snap_dir = Path(snap_dir) if snap_dir is not None else cfg.path("snapshots")
    out = Path(out) if out is not None else cfg.path("report")
    distribution = distribution or cfg.probe.distribution
    if distribution not in ("learned", "normal"):
        raise ConfigError(f"distribution must be 'learned' or 'normal', got {distribution!r}")
    samples = cfg.probe.samples if samples is None else samples
    compare = cfg.probe.compare_distributions if compare is None else compare
    measure = bench_fn(cfg.probe.bench_repetitions, cfg.probe.bench_warmup, cfg.probe.end_to_end, throughput_table)

    loaded = {}
    for lc in cfg.layers:
        p_in, p_w = snapshot_paths(snap_dir, lc.spec.name)
        for p in (p_in, p_w):
            if not p.exists():
                raise CorruptSnapshot(f"missing snapshot {p}; run `track` first")
        loaded[lc.spec.name] = (snapshot_load(p_in), snapshot_load(p_w))

    root = Rng(cfg.seed)

    def run_layer(lc):
        learned, ws = loaded[lc.spec.name]
        layer_rng = root.spawn(lc.spec.name).spawn("probe")
        stats = learned if distribution == "learned" else standard_input_stats(lc.spec.in_features)
        results = probe_layer(lc.spec, stats, ws, cfg.candidates, samples, layer_rng, DIRECTIONS, measure)
        rows: list[ComparisonRow] = []
        if compare:
            rows = compare_distributions(lc.spec, ws, cfg.candidates, samples, root.spawn(lc.spec.name).spawn("compare"), learned)
        return results, rows

    with ThreadPoolExecutor(max_workers=max(1, cfg.probe.workers)) as pool:
        per_layer = list(pool.map(run_layer, cfg.layers))

    echo = {
        "seed": cfg.seed,
        "samples": samples,
        "distribution": distribution,
        "throughput_source": "table+measured" if throughput_table is not None else "measured",
        "end_to_end_throughput": cfg.probe.end_to_end,
        "layers": [lc.to_dict() for lc in cfg.layers],
        "candidates": [c.to_dict() for c in cfg.candidates],
        "dispatch": cfg.dispatch.to_dict(),
        "mods": asdict(cfg.mods),
    }
    report = ProbeReport(
        [r for results, _ in per_layer for r in results],
        echo,
        [row for _, rows in per_layer for row in rows],
    )
    report.save(out)
    return report


def cmd_dispatch(
    cfg: PipelineConfig,
    report_path: Path | None = None,
    out: Path | None = None,
    throughput_table: ThroughputTable | None = None,
) -> DispatchPlan:
    report_path = Path(report_path) if report_path is not None else cfg.path("report")
    out = Path(out) if out is not None else cfg.path("plan")
    report = ProbeReport.load(report_path)
    mods = report.config.get("mods")
    if mods is not None and mods != asdict(cfg.mods):
        raise ConfigError(f"report was probed with mods {mods}, config has {asdict(cfg.mods)}")
    if throughput_table is not None:
        report = apply_throughput_table(report, throughput_table)
    plan = build_plan(report, cfg.dispatch)
    plan.save(out)
    return plan


def _fmt(x: float) -> str:
    return f"{x:.4g}"


def render_report(report: ProbeReport) -> str:
    if not report.results:
        return "no results\n"
    lines = [f"{'layer':<16} {'direction':<22} {'candidate':<18} {'MERE':>9} {'MERE max':>9} {'speedup':>8}"]
    for r in report.results:
        lines.append(f"{r.layer:<16} {str(r.direction):<22} {r.candidate_id:<18} "
                     f"{_fmt(r.mere):>9} {_fmt(r.mere_max):>9} {_fmt(r.speedup_vs_baseline):>8}")
    lines.append("")
    lines.append("geomean MERE across layers")
    groups: dict[tuple[str, str], list[float]] = {}
    for r in report.results:
        groups.setdefault((str(r.direction), r.candidate_id), []).append(r.mere)
    for (d, cid), vals in sorted(groups.items()):
        lines.append(f"{'geomean':<16} {d:<22} {cid:<18} {_fmt(geomean_mere(vals)):>9}")
    if report.comparison:
        lines.append("")
        lines.append(f"{'candidate':<18} {'Normal Dist.':>13} {'Learned Dist.':>14} {'ratio':>7}")
        for row in distribution_table(report.comparison):
            lines.append(f"{row['candidate_id']:<18} {_fmt(row['normal_geomean']):>13} "
                         f"{_fmt(row['learned_geomean']):>14} {_fmt(row['ratio']):>7}")
    return "\n".join(lines) + "\n"


def render_plan(plan: DispatchPlan) -> str:
    if not plan.entries:
        return "no results\n"
    lines = [f"{'layer':<16} {'direction':<22} {'chosen':<18} {'MERE':>9} {'speedup':>8}"]
    for e in plan.to_body()["entries"]:
        lines.append(f"{e['layer']:<16} {e['direction']:<22} {e['candidate_id']:<18} "
                     f"{_fmt(e['mere']):>9} {_fmt(e['speedup']):>8}")
    lines.append(f"report {plan.report_hash}")
    return "\n".join(lines) + "\n"


def cmd_report(path: Path, csv_out: Path | None = None) -> str:
    """Human-readable rendering of a report or plan; optional CSV export."""
    body, env = read_document(path)
    if env["kind"] == "report":
        obj = ProbeReport.from_body(body)
        text, table = render_report(obj), obj.to_csv()
    elif env["kind"] == "plan":
        obj = DispatchPlan.from_body(body, env.get("created"))
        text, table = render_plan(obj), obj.to_csv()
    else:
        raise CorruptSnapshot(f"{path}: cannot render a {env['kind']!r} document")
    if csv_out is not None:
        Path(csv_out).write_text(table, encoding="utf-8")
    return text
