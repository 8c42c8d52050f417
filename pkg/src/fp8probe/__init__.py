"""FP8 GEMM error probing on learned input/weight distributions, plus static dispatch."""

from .config import PipelineConfig
from .dispatch import DispatchConfig, DispatchPlan, PlanEntry, apply_plan, build_plan, filter_candidates, select
from .errors import (
    CholeskyFailure,
    ConfigError,
    CorruptSnapshot,
    EmptyList,
    FormatVersionMismatch,
    Fp8ProbeError,
    IndivisibleFeatureDim,
    InsufficientSamples,
    MalformedReport,
    MissingPlanEntry,
    NonFiniteInput,
    NotPositiveDefinite,
    ShapeMismatch,
)
from .fp8 import E4M3, E5M2, Fp8Format, Granularity, QuantizedMatrix, QuantRecipe, decode, dequantize, encode, fake_quantize, quantize
from .gemm import GemmDirection, LayerSpec, ThroughputSample, bench_throughput, gemm_lowprec, gemm_ref
from .mods import BlockNormConfig, blocknorm_backward, blocknorm_forward, hardswish_backward, hardswish_forward, rmsnorm
from .probe import Candidate, CandidateResult, ProbeReport, ThroughputTable, compare_distributions, geomean_mere, mere, probe_layer
from .sampling import Rng, cholesky_jittered, sample_input, sample_weight
from .tracking import InputStats, ProbeSchedule, WeightStats, input_covariance, input_update, snapshot_load, snapshot_save, weight_init, weight_update

__version__ = "0.1.0"
