"""Per-(layer, direction) recipe selection under accuracy and speedup limits.

A candidate is eligible when its MERE statistic is strictly below
``mere_threshold`` and its speedup strictly above ``min_speedup``. The
eligible candidate with the highest throughput wins (ties: smallest id);
with nothing eligible the layer stays on the high-precision baseline.
Plans are static: built once from a report, then applied as-is.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

from .errors import MalformedReport, MissingPlanEntry
from .fp8 import QuantRecipe
from .gemm import GemmDirection, LayerSpec, gemm_lowprec, gemm_ref
from .persist import read_document, write_document
from .probe import BASELINE_ID, Candidate, CandidateResult, ProbeReport, ThroughputTable


@dataclass(frozen=True)
class DispatchConfig:
    mere_threshold: float = 0.2
    min_speedup: float = 1.05
    mere_statistic: str = "mean"  # or "max" over sampled pairs

    def __post_init__(self):
        if not self.mere_threshold > 0:
            raise ValueError("mere_threshold must be > 0")
        if not self.min_speedup >= 1:
            raise ValueError("min_speedup must be >= 1")
        if self.mere_statistic not in ("mean", "max"):
            raise ValueError("mere_statistic must be 'mean' or 'max'")

    def statistic(self, r: CandidateResult) -> float:
        return r.mere if self.mere_statistic == "mean" else r.mere_max

    def to_dict(self) -> dict:
        return asdict(self)


def filter_candidates(results: Iterable[CandidateResult], cfg: DispatchConfig) -> list[CandidateResult]:
    """Keep accurate-and-fast-enough results; baseline rows pass through untouched."""
    return [
        r for r in results
        if r.is_baseline or (cfg.statistic(r) < cfg.mere_threshold and r.speedup_vs_baseline > cfg.min_speedup)
    ]


@dataclass(frozen=True)
class PlanEntry:
    layer: str
    direction: GemmDirection
    candidate_id: str
    mere: float
    speedup: float
    recipe_a: QuantRecipe | None = None
    recipe_b: QuantRecipe | None = None

    @property
    def is_baseline(self) -> bool:
        return self.candidate_id == BASELINE_ID

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "direction": str(self.direction),
            "candidate_id": self.candidate_id,
            "mere": self.mere,
            "speedup": self.speedup,
            "recipe_a": str(self.recipe_a) if self.recipe_a else None,
            "recipe_b": str(self.recipe_b) if self.recipe_b else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlanEntry":
        return cls(
            d["layer"],
            GemmDirection(d["direction"]),
            d["candidate_id"],
            float(d["mere"]),
            float(d["speedup"]),
            QuantRecipe.parse(d["recipe_a"]) if d.get("recipe_a") else None,
            QuantRecipe.parse(d["recipe_b"]) if d.get("recipe_b") else None,
        )


def _best(eligible: Sequence[CandidateResult]) -> CandidateResult:
    return min(eligible, key=lambda r: (-r.throughput.elements_per_second, r.candidate_id))


def select(results: Sequence[CandidateResult], cfg: DispatchConfig, candidates: dict[str, Candidate] | None = None) -> PlanEntry:
    """Choose one implementation for a single (layer, direction)."""
    keys = {(r.layer, GemmDirection(r.direction)) for r in results}
    if len(keys) != 1:
        raise ValueError(f"select needs results for exactly one (layer, direction), got {sorted(map(str, keys))}")
    layer, direction = keys.pop()
    eligible = [r for r in filter_candidates(results, cfg) if not r.is_baseline]
    if not eligible:
        base = next((r for r in results if r.is_baseline), None)
        return PlanEntry(layer, direction, BASELINE_ID, base.mere if base else 0.0, 1.0)
    best = _best(eligible)
    ra = rb = None
    if candidates is not None:
        if best.candidate_id not in candidates:
            raise MalformedReport(f"report has no definition for candidate {best.candidate_id!r}")
        ra, rb = candidates[best.candidate_id].recipes_for(direction)
    return PlanEntry(layer, direction, best.candidate_id, best.mere, best.speedup_vs_baseline, ra, rb)


def _grouped(results: Iterable[CandidateResult]) -> dict[tuple[str, GemmDirection], list[CandidateResult]]:
    groups: dict[tuple[str, GemmDirection], list[CandidateResult]] = defaultdict(list)
    for r in results:
        groups[(r.layer, GemmDirection(r.direction))].append(r)
    for key, rs in groups.items():
        ids = [r.candidate_id for r in rs]
        if len(set(ids)) != len(ids):
            raise MalformedReport(f"{key[0]}/{key[1]}: duplicate candidate ids")
        if BASELINE_ID not in ids:
            raise MalformedReport(f"{key[0]}/{key[1]}: no baseline row")
    return groups


def apply_throughput_table(report: ProbeReport, table: ThroughputTable) -> ProbeReport:
    """Override throughput by candidate id and recompute speedups."""
    out = []
    for (layer, direction), rs in _grouped(report.results).items():
        def eps_of(r: CandidateResult) -> float:
            hit = table.lookup(layer, direction, r.candidate_id)
            return r.throughput.elements_per_second if hit is None else hit

        base_eps = eps_of(next(r for r in rs if r.is_baseline))
        for r in rs:
            eps = eps_of(r)
            tp = replace(r.throughput, elements_per_second=eps,
                         median_latency=r.throughput.median_latency * r.throughput.elements_per_second / eps)
            out.append(replace(r, throughput=tp, speedup_vs_baseline=eps / base_eps))
    return ProbeReport(out, dict(report.config), list(report.comparison))


@dataclass(eq=False)
class DispatchPlan:
    entries: dict[tuple[str, GemmDirection], PlanEntry]
    report_hash: str = ""
    config: DispatchConfig = field(default_factory=DispatchConfig)
    created: str | None = None

    def entry(self, layer: str, direction: GemmDirection) -> PlanEntry:
        try:
            return self.entries[(layer, GemmDirection(direction))]
        except KeyError:
            raise MissingPlanEntry(f"plan has no entry for {layer}/{direction}") from None

    def to_body(self) -> dict:
        return {
            "entries": [e.to_dict() for _, e in sorted(self.entries.items(), key=lambda kv: (kv[0][0], kv[0][1].value))],
            "provenance": {"report_hash": self.report_hash, "dispatch_config": self.config.to_dict()},
        }

    @classmethod
    def from_body(cls, body: dict, created: str | None = None) -> "DispatchPlan":
        try:
            entries = [PlanEntry.from_dict(e) for e in body["entries"]]
            prov = body["provenance"]
            cfg = DispatchConfig(**prov["dispatch_config"])
            return cls({(e.layer, e.direction): e for e in entries}, prov["report_hash"], cfg, created)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedReport(f"malformed plan body: {exc}") from None

    def __eq__(self, other) -> bool:
        if not isinstance(other, DispatchPlan):
            return NotImplemented
        return self.to_body() == other.to_body()

    def save(self, path) -> str:
        return write_document(path, "plan", self.to_body())

    @classmethod
    def load(cls, path) -> "DispatchPlan":
        body, env = read_document(path, "plan")
        return cls.from_body(body, env.get("created"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "direction", "candidate_id", "mere", "speedup", "recipe_a", "recipe_b"])
        for e in self.to_body()["entries"]:
            writer.writerow([e["layer"], e["direction"], e["candidate_id"], e["mere"], e["speedup"],
                             e["recipe_a"] or "", e["recipe_b"] or ""])
        return buf.getvalue()


def report_candidates(report: ProbeReport) -> dict[str, Candidate]:
    try:
        return {c["id"]: Candidate.from_dict(c) for c in report.config.get("candidates", [])}
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedReport(f"bad candidate definitions in report config: {exc}") from None


def build_plan(report: ProbeReport, cfg: DispatchConfig = DispatchConfig(), candidates: dict[str, Candidate] | None = None) -> DispatchPlan:
    """Select independently for every (layer, direction) in the report."""
    if candidates is None:
        candidates = report_candidates(report) or None
    entries = {key: select(rs, cfg, candidates) for key, rs in _grouped(report.results).items()}
    return DispatchPlan(entries, report.content_hash(), cfg)


def apply_plan(plan: DispatchPlan, spec: LayerSpec, a, b, direction: GemmDirection = GemmDirection.FORWARD, bias=None):
    """Run the product for ``direction`` through the planned implementation."""
    e = plan.entry(spec.name, direction)
    if e.is_baseline:
        return gemm_ref(a, b, direction, bias)
    if e.recipe_a is None or e.recipe_b is None:
        raise MalformedReport(f"plan entry {e.layer}/{e.direction} names {e.candidate_id!r} but carries no recipes")
    return gemm_lowprec(a, b, e.recipe_a, e.recipe_b, direction, bias)
