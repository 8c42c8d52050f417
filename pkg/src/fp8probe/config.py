"""Pipeline configuration: one JSON document with every default spelled out."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .dispatch import DispatchConfig
from .errors import ConfigError
from .gemm import LayerSpec
from .mods import BlockNormConfig
from .probe import DEFAULT_SAMPLES, Candidate
from .synth import HEAVY_DEFAULT, Distribution
from .tracking import DEFAULT_EPSILON_REL, DEFAULT_MOMENTUM, ProbeSchedule

_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


@dataclass(frozen=True)
class LayerConfig:
    spec: LayerSpec
    distribution: Distribution = Distribution()

    def to_dict(self) -> dict:
        d = asdict(self.spec)
        d["distribution"] = self.distribution.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerConfig":
        d = dict(d)
        dist = Distribution.from_dict(d.pop("distribution", {}))
        return cls(LayerSpec(**d), dist)


@dataclass(frozen=True)
class TrackingConfig:
    iterations: int = 10_000
    momentum: float = DEFAULT_MOMENTUM
    epsilon_rel: float = DEFAULT_EPSILON_REL

    def __post_init__(self):
        if not 0.9 <= self.momentum <= 0.99:
            raise ConfigError(f"tracking.momentum must lie in [0.9, 0.99], got {self.momentum}")
        if self.iterations < 0 or self.epsilon_rel < 0:
            raise ConfigError("tracking.iterations and tracking.epsilon_rel must be >= 0")


@dataclass(frozen=True)
class ProbeConfig:
    samples: int = DEFAULT_SAMPLES
    distribution: str = "learned"  # or "normal"
    compare_distributions: bool = False
    bench_repetitions: int = 5
    bench_warmup: int = 1
    end_to_end: bool = True
    workers: int = 1


@dataclass(frozen=True)
class PathsConfig:
    snapshots: str = "snapshots"
    report: str = "report.json"
    plan: str = "plan.json"


def default_layers() -> list[LayerConfig]:
    return [
        LayerConfig(LayerSpec("dense0", 256, 512, 256), HEAVY_DEFAULT),
        LayerConfig(LayerSpec("dense1", 256, 256, 256), HEAVY_DEFAULT),
        LayerConfig(LayerSpec("interaction", 256, 256, 512), Distribution("correlated", rho=0.8, weight_rho=0.3)),
        LayerConfig(LayerSpec("head", 256, 512, 128), Distribution("normal")),
    ]


def default_candidates() -> list[Candidate]:
    return [
        Candidate.from_dict({"id": "e4m3-tensorwise", "activation": "e4m3/tensorwise",
                             "weight": "e4m3/tensorwise", "gradient": "e5m2/tensorwise"}),
        Candidate.from_dict({"id": "e4m3-rowwise", "activation": "e4m3/rowwise",
                             "weight": "e4m3/rowwise", "gradient": "e5m2/rowwise"}),
        Candidate.from_dict({"id": "e4m3-blockwise", "activation": "e4m3/blockwise:1x128",
                             "weight": "e4m3/blockwise:128x128", "gradient": "e5m2/blockwise:1x128"}),
    ]


@dataclass
class PipelineConfig:
    layers: list[LayerConfig] = field(default_factory=default_layers)
    candidates: list[Candidate] = field(default_factory=default_candidates)
    schedule: ProbeSchedule = field(default_factory=ProbeSchedule)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    dispatch: DispatchConfig = field(default_factory=DispatchConfig)
    mods: BlockNormConfig = field(default_factory=BlockNormConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0
    base_dir: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        names = [lc.spec.name for lc in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError("layer names must be unique")
        bad = [n for n in names if not _NAME_RE.match(n)]
        if bad:
            raise ConfigError(f"layer names must match {_NAME_RE.pattern}: {bad}")
        ids = [c.candidate_id for c in self.candidates]
        if len(set(ids)) != len(ids):
            raise ConfigError("candidate ids must be unique")
        if self.probe.distribution not in ("learned", "normal"):
            raise ConfigError("probe.distribution must be 'learned' or 'normal'")
        if self.probe.samples < 1:
            raise ConfigError("probe.samples must be >= 1")

    def path(self, name: str) -> Path:
        return self.base_dir / getattr(self.paths, name)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "layers": [lc.to_dict() for lc in self.layers],
            "candidates": [c.to_dict() for c in self.candidates],
            "schedule": asdict(self.schedule),
            "tracking": asdict(self.tracking),
            "probe": asdict(self.probe),
            "dispatch": self.dispatch.to_dict(),
            "mods": asdict(self.mods),
            "paths": asdict(self.paths),
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | str = ".") -> "PipelineConfig":
        known = {"seed", "layers", "candidates", "schedule", "tracking", "probe", "dispatch", "mods", "paths"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            kwargs = {
                "seed": int(d.get("seed", 0)),
                "schedule": ProbeSchedule(**d.get("schedule", {})),
                "tracking": TrackingConfig(**d.get("tracking", {})),
                "probe": ProbeConfig(**d.get("probe", {})),
                "dispatch": DispatchConfig(**d.get("dispatch", {})),
                "mods": BlockNormConfig(**d.get("mods", {})),
                "paths": PathsConfig(**d.get("paths", {})),
                "base_dir": Path(base_dir),
            }
            if "layers" in d:
                kwargs["layers"] = [LayerConfig.from_dict(x) for x in d["layers"]]
            if "candidates" in d:
                kwargs["candidates"] = [Candidate.from_dict(x) for x in d["candidates"]]
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid config: {exc}") from None
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data, base_dir=path.parent)

    def dump(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"
