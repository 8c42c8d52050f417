"""Offline error and throughput quantification per layer and candidate.

MERE here is the per-element mean ``mean(|out - ref| / max(|ref|, floor))``
with ``floor = 1e-6 * mean(|ref|)``; all reported numbers use this form.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import EmptyList, MalformedReport, ShapeMismatch
from .fp8 import QuantRecipe
from .gemm import DIRECTIONS, GemmDirection, LayerSpec, ThroughputSample, bench_throughput, gemm_lowprec, gemm_ref
from .persist import content_hash, read_document, write_document
from .sampling import Rng, sample_input, sample_weight, standard_input_stats
from .tracking import InputStats, WeightStats

BASELINE_ID = "baseline"
DEFAULT_SAMPLES = 50
REF_FLOOR_REL = 1e-6
MERE_FLOOR = 1e-6


@dataclass(frozen=True)
class Candidate:
    """A named low-precision scheme: one recipe per operand role."""

    candidate_id: str
    activation: QuantRecipe
    weight: QuantRecipe
    gradient: QuantRecipe
    directions: tuple[GemmDirection, ...] = DIRECTIONS

    def __post_init__(self):
        if self.candidate_id == BASELINE_ID:
            raise ValueError(f"{BASELINE_ID!r} is reserved for the high-precision path")

    def recipes_for(self, direction: GemmDirection) -> tuple[QuantRecipe, QuantRecipe]:
        direction = GemmDirection(direction)
        if direction is GemmDirection.FORWARD:
            return self.activation, self.weight
        if direction is GemmDirection.BACKWARD_INPUT_GRAD:
            return self.gradient, self.weight
        return self.gradient, self.activation

    def to_dict(self) -> dict:
        return {
            "id": self.candidate_id,
            "activation": str(self.activation),
            "weight": str(self.weight),
            "gradient": str(self.gradient),
            "directions": [str(d) for d in self.directions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Candidate":
        act = QuantRecipe.parse(d["activation"])
        return cls(
            d["id"],
            act,
            QuantRecipe.parse(d.get("weight", d["activation"])),
            QuantRecipe.parse(d.get("gradient", d["activation"])),
            tuple(GemmDirection(x) for x in d.get("directions", [x.value for x in DIRECTIONS])),
        )


def mere(out, ref, ref_floor: float | None = None) -> float:
    """Mean element-wise relative error of ``out`` against ``ref``."""
    out = np.asarray(out, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if out.shape != ref.shape:
        raise ShapeMismatch(f"MERE of shapes {out.shape} and {ref.shape}")
    if ref.size == 0:
        return 0.0
    abs_ref = np.abs(ref)
    if ref_floor is None:
        ref_floor = REF_FLOOR_REL * float(abs_ref.mean())
    denom = np.maximum(abs_ref, max(ref_floor, np.finfo(np.float64).tiny))
    return float(np.mean(np.abs(out - ref) / denom))


def geomean_mere(values: Iterable[float]) -> float:
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise EmptyList("geomean of an empty list")
    vals = np.where(vals <= 0.0, MERE_FLOOR, vals)
    return float(np.exp(np.mean(np.log(vals))))


@dataclass(frozen=True)
class CandidateResult:
    layer: str
    direction: GemmDirection
    candidate_id: str
    mere: float  # mean over sampled pairs
    mere_max: float  # worst sampled pair
    throughput: ThroughputSample
    speedup_vs_baseline: float
    sample_count: int

    @property
    def is_baseline(self) -> bool:
        return self.candidate_id == BASELINE_ID

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "direction": str(self.direction),
            "candidate_id": self.candidate_id,
            "mere": self.mere,
            "mere_max": self.mere_max,
            "elements_per_second": self.throughput.elements_per_second,
            "median_latency": self.throughput.median_latency,
            "repetitions": self.throughput.repetitions,
            "speedup_vs_baseline": self.speedup_vs_baseline,
            "sample_count": self.sample_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CandidateResult":
        return cls(
            d["layer"],
            GemmDirection(d["direction"]),
            d["candidate_id"],
            float(d["mere"]),
            float(d["mere_max"]),
            ThroughputSample(float(d["elements_per_second"]), float(d["median_latency"]), int(d["repetitions"])),
            float(d["speedup_vs_baseline"]),
            int(d["sample_count"]),
        )


class ThroughputTable:
    """Externally measured throughput, keyed by candidate id.

    CSV columns: ``candidate_id, elements_per_second`` and optionally
    ``layer`` and ``direction``; empty layer/direction cells match anything,
    and the most specific row wins.
    """

    def __init__(self, rows: Iterable[tuple[str | None, str | None, str, float]] = ()):
        self._rows: dict[tuple[str | None, str | None, str], float] = {}
        for layer, direction, cid, eps in rows:
            if not eps > 0:
                raise ValueError(f"throughput for {cid!r} must be > 0")
            self._rows[(layer or None, str(GemmDirection(direction)) if direction else None, cid)] = float(eps)

    def __len__(self) -> int:
        return len(self._rows)

    @classmethod
    def from_csv(cls, path) -> "ThroughputTable":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"candidate_id", "elements_per_second"} <= set(reader.fieldnames):
                raise ValueError(f"{path}: needs candidate_id and elements_per_second columns")
            rows = [
                (r.get("layer") or None, r.get("direction") or None, r["candidate_id"], float(r["elements_per_second"]))
                for r in reader
            ]
        return cls(rows)

    def lookup(self, layer: str, direction: GemmDirection, candidate_id: str) -> float | None:
        d = str(direction)
        for key in ((layer, d, candidate_id), (layer, None, candidate_id), (None, d, candidate_id), (None, None, candidate_id)):
            if key in self._rows:
                return self._rows[key]
        return None

    def sample(self, spec: LayerSpec, direction: GemmDirection, candidate_id: str) -> ThroughputSample | None:
        eps = self.lookup(spec.name, direction, candidate_id)
        if eps is None:
            return None
        return ThroughputSample(eps, spec.flops() / eps, 1)


ThroughputFn = Callable[[LayerSpec, "Candidate | None", GemmDirection], ThroughputSample]


def bench_fn(repetitions: int = 5, warmup: int = 1, end_to_end: bool = True, table: ThroughputTable | None = None) -> ThroughputFn:
    """Throughput source: injected table entries first, local benchmark otherwise."""

    def measure(spec: LayerSpec, cand: Candidate | None, direction: GemmDirection) -> ThroughputSample:
        if table is not None:
            hit = table.sample(spec, direction, cand.candidate_id if cand else BASELINE_ID)
            if hit is not None:
                return hit
        if cand is None:
            return bench_throughput(spec, None, None, direction, repetitions, warmup)
        ra, rb = cand.recipes_for(direction)
        return bench_throughput(spec, ra, rb, direction, repetitions, warmup, end_to_end=end_to_end)

    return measure


def _check_layer_stats(spec: LayerSpec, in_stats: InputStats, w_stats: WeightStats) -> None:
    if in_stats.feature_dim != spec.in_features:
        raise ShapeMismatch(f"{spec.name}: input stats have K={in_stats.feature_dim}, layer has {spec.in_features}")
    if w_stats.shape != (spec.out_features, spec.in_features):
        raise ShapeMismatch(
            f"{spec.name}: weight stats shape {w_stats.shape}, layer weight is {(spec.out_features, spec.in_features)}"
        )


def measure_errors(
    spec: LayerSpec,
    in_stats: InputStats,
    w_stats: WeightStats,
    candidates: Sequence[Candidate],
    samples: int,
    rng: Rng,
    directions: Sequence[GemmDirection] = DIRECTIONS,
    grad_stats: InputStats | None = None,
) -> dict[tuple[GemmDirection, str], list[float]]:
    """Per-pair MERE for every (direction, candidate), baseline included.

    Inputs, weights and output gradients come from separate sub-streams of
    ``rng``, so two calls that differ only in ``in_stats`` see the same weights.
    Without ``grad_stats`` output gradients are iid standard normal.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    _check_layer_stats(spec, in_stats, w_stats)
    directions = [GemmDirection(d) for d in directions]
    rng_x, rng_w, rng_g = rng.spawn("inputs"), rng.spawn("weights"), rng.spawn("grads")
    errors: dict[tuple[GemmDirection, str], list[float]] = defaultdict(list)
    needs_grad = any(d is not GemmDirection.FORWARD for d in directions)
    for _ in range(samples):
        x = sample_input(in_stats, spec.batch, rng_x)
        w = sample_weight(w_stats, rng_w)
        dy = None
        if needs_grad:
            if grad_stats is not None:
                dy = sample_input(grad_stats, spec.batch, rng_g)
            else:
                dy = rng_g.normal((spec.batch, spec.out_features)).astype(np.float32)
        operands = {
            GemmDirection.FORWARD: (x, w),
            GemmDirection.BACKWARD_INPUT_GRAD: (dy, w),
            GemmDirection.BACKWARD_WEIGHT_GRAD: (dy, x),
        }
        for d in directions:
            a, b = operands[d]
            ref = gemm_ref(a, b, d)
            errors[(d, BASELINE_ID)].append(mere(gemm_ref(a, b, d), ref))
            for cand in candidates:
                if d not in cand.directions:
                    continue
                ra, rb = cand.recipes_for(d)
                errors[(d, cand.candidate_id)].append(mere(gemm_lowprec(a, b, ra, rb, d), ref))
    return dict(errors)


def probe_layer(
    spec: LayerSpec,
    in_stats: InputStats,
    w_stats: WeightStats,
    candidates: Sequence[Candidate],
    samples: int = DEFAULT_SAMPLES,
    rng: Rng | None = None,
    directions: Sequence[GemmDirection] = DIRECTIONS,
    throughput: ThroughputFn | None = None,
    grad_stats: InputStats | None = None,
) -> list[CandidateResult]:
    """MERE on sampled pairs plus throughput and speedup for each candidate."""
    rng = rng if rng is not None else Rng(0)
    throughput = throughput or bench_fn()
    errors = measure_errors(spec, in_stats, w_stats, candidates, samples, rng, directions, grad_stats)
    by_id = {c.candidate_id: c for c in candidates}
    results = []
    for d in (GemmDirection(x) for x in directions):
        base = throughput(spec, None, d)
        ids = [BASELINE_ID] + [c.candidate_id for c in candidates if d in c.directions]
        for cid in ids:
            tp = base if cid == BASELINE_ID else throughput(spec, by_id[cid], d)
            errs = errors[(d, cid)]
            results.append(
                CandidateResult(
                    spec.name,
                    d,
                    cid,
                    float(np.mean(errs)),
                    float(np.max(errs)),
                    tp,
                    tp.elements_per_second / base.elements_per_second,
                    len(errs),
                )
            )
    return results


@dataclass(frozen=True)
class ComparisonRow:
    layer: str
    candidate_id: str
    normal_mere: float
    learned_mere: float

    @property
    def ratio(self) -> float:
        return self.learned_mere / max(self.normal_mere, MERE_FLOOR)

    def to_dict(self) -> dict:
        return {"layer": self.layer, "candidate_id": self.candidate_id,
                "normal_mere": self.normal_mere, "learned_mere": self.learned_mere}


def compare_distributions(
    spec: LayerSpec,
    w_stats: WeightStats,
    candidates: Sequence[Candidate],
    samples: int,
    rng: Rng,
    learned_stats: InputStats,
    direction: GemmDirection = GemmDirection.FORWARD,
) -> list[ComparisonRow]:
    """Forward MERE with N(0, I) inputs versus learned inputs, same weights."""
    normal = measure_errors(spec, standard_input_stats(spec.in_features), w_stats, candidates, samples, rng, [direction])
    learned = measure_errors(spec, learned_stats, w_stats, candidates, samples, rng, [direction])
    return [
        ComparisonRow(spec.name, c.candidate_id,
                      float(np.mean(normal[(direction, c.candidate_id)])),
                      float(np.mean(learned[(direction, c.candidate_id)])))
        for c in candidates
        if direction in c.directions
    ]


def distribution_table(rows: Sequence[ComparisonRow]) -> list[dict]:
    """Geomean across layers per candidate, normal next to learned."""
    grouped: dict[str, list[ComparisonRow]] = defaultdict(list)
    for r in rows:
        grouped[r.candidate_id].append(r)
    table = []
    for cid, rs in grouped.items():
        normal = geomean_mere(r.normal_mere for r in rs)
        learned = geomean_mere(r.learned_mere for r in rs)
        table.append({"candidate_id": cid, "layers": len(rs), "normal_geomean": normal,
                      "learned_geomean": learned, "ratio": learned / normal})
    return table


@dataclass
class ProbeReport:
    results: list[CandidateResult]
    config: dict = field(default_factory=dict)
    comparison: list[ComparisonRow] = field(default_factory=list)

    def layer_aggregates(self) -> dict:
        """Per (layer, direction): geomean MERE of the non-baseline candidates and best speedup."""
        groups: dict[tuple[str, str], list[CandidateResult]] = defaultdict(list)
        for r in self.results:
            if not r.is_baseline:
                groups[(r.layer, str(r.direction))].append(r)
        out: dict = {}
        for (layer, d), rs in sorted(groups.items()):
            out.setdefault(layer, {})[d] = {
                "geomean_mere": geomean_mere(r.mere for r in rs),
                "best_speedup": max(r.speedup_vs_baseline for r in rs),
            }
        return out

    def candidate_geomeans(self) -> dict:
        """Per (direction, candidate): geomean MERE across layers."""
        groups: dict[tuple[str, str], list[float]] = defaultdict(list)
        for r in self.results:
            groups[(str(r.direction), r.candidate_id)].append(r.mere)
        return {f"{d}/{cid}": geomean_mere(v) for (d, cid), v in sorted(groups.items())}

    def to_body(self) -> dict:
        body = {
            "config": self.config,
            "results": [r.to_dict() for r in self.results],
            "aggregates": {"layers": self.layer_aggregates(), "candidates": self.candidate_geomeans()}
            if self.results else {"layers": {}, "candidates": {}},
            "mere_definition": "mean over elements of |out-ref|/max(|ref|, 1e-6*mean|ref|)",
        }
        if self.comparison:
            body["comparison"] = {
                "rows": [r.to_dict() for r in self.comparison],
                "table": distribution_table(self.comparison),
            }
        return body

    @classmethod
    def from_body(cls, body: dict) -> "ProbeReport":
        try:
            results = [CandidateResult.from_dict(r) for r in body["results"]]
            comparison = [ComparisonRow(**r) for r in body.get("comparison", {}).get("rows", [])]
            return cls(results, dict(body.get("config", {})), comparison)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedReport(f"malformed report body: {exc}") from None

    def content_hash(self) -> str:
        return content_hash("report", self.to_body())

    def save(self, path) -> str:
        return write_document(path, "report", self.to_body())

    @classmethod
    def load(cls, path) -> "ProbeReport":
        body, _ = read_document(path, "report")
        return cls.from_body(body)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["layer", "direction", "candidate_id", "mere", "mere_max", "elements_per_second",
                "median_latency", "repetitions", "speedup_vs_baseline", "sample_count"]
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for r in self.results:
            writer.writerow(r.to_dict())
        return buf.getvalue()

