"""Reference and simulated-FP8 GEMMs for the three linear-layer products.

Operand layouts per direction (``a``, ``b``):

    forward              x (B,K),  w (N,K)   ->  x @ w.T   (B,N)
    backward_input_grad  dy (B,N), w (N,K)   ->  dy @ w    (B,K)
    backward_weight_grad dy (B,N), x (B,K)   ->  dy.T @ x  (N,K)

The reference accumulates in float64 and rounds to float32. The low-precision
path quantizes both operands, dequantizes them, and multiplies with float32
accumulation.
"""

from __future__ import annotations

import enum
import statistics
import threading
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ShapeMismatch, check_finite
from .fp8 import QuantRecipe, fake_quantize


class GemmDirection(str, enum.Enum):
    FORWARD = "forward"
    BACKWARD_INPUT_GRAD = "backward_input_grad"
    BACKWARD_WEIGHT_GRAD = "backward_weight_grad"

    def __str__(self) -> str:
        return self.value


DIRECTIONS = tuple(GemmDirection)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    batch: int
    in_features: int
    out_features: int
    has_bias: bool = False

    def __post_init__(self):
        if min(self.batch, self.in_features, self.out_features) < 1:
            raise ValueError(f"layer {self.name!r}: all dimensions must be >= 1")

    def operand_shapes(self, direction: GemmDirection) -> tuple[tuple[int, int], tuple[int, int]]:
        B, K, N = self.batch, self.in_features, self.out_features
        return {
            GemmDirection.FORWARD: ((B, K), (N, K)),
            GemmDirection.BACKWARD_INPUT_GRAD: ((B, N), (N, K)),
            GemmDirection.BACKWARD_WEIGHT_GRAD: ((B, N), (B, K)),
        }[GemmDirection(direction)]

    def flops(self) -> int:
        return self.batch * self.in_features * self.out_features


def _check_shapes(a: np.ndarray, b: np.ndarray, direction: GemmDirection) -> None:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"operands must be 2-D, got {a.shape} and {b.shape}")
    direction = GemmDirection(direction)
    if direction is GemmDirection.FORWARD:
        ok = a.shape[1] == b.shape[1]
    elif direction is GemmDirection.BACKWARD_INPUT_GRAD:
        ok = a.shape[1] == b.shape[0]
    else:
        ok = a.shape[0] == b.shape[0]
    if not ok:
        raise ShapeMismatch(f"{direction}: incompatible operand shapes {a.shape} and {b.shape}")


def _product(a: np.ndarray, b: np.ndarray, direction: GemmDirection) -> np.ndarray:
    if direction is GemmDirection.FORWARD:
        return a @ b.T
    if direction is GemmDirection.BACKWARD_INPUT_GRAD:
        return a @ b
    return a.T @ b


def _add_bias(out: np.ndarray, bias, direction: GemmDirection) -> np.ndarray:
    if bias is None:
        return out
    if direction is not GemmDirection.FORWARD:
        raise ValueError("bias only applies to the forward product")
    bias = np.asarray(bias, dtype=np.float32)
    if bias.shape != (out.shape[1],):
        raise ShapeMismatch(f"bias shape {bias.shape} does not match output width {out.shape[1]}")
    return out + bias


def gemm_ref(a, b, direction: GemmDirection = GemmDirection.FORWARD, bias=None) -> np.ndarray:
    """High-precision oracle: float64 accumulation, float32 result."""
    direction = GemmDirection(direction)
    a, b = np.asarray(a), np.asarray(b)
    _check_shapes(a, b, direction)
    out = _product(a.astype(np.float64), b.astype(np.float64), direction).astype(np.float32)
    return _add_bias(out, bias, direction)


def gemm_lowprec(
    a,
    b,
    recipe_a: QuantRecipe,
    recipe_b: QuantRecipe,
    direction: GemmDirection = GemmDirection.FORWARD,
    bias=None,
) -> np.ndarray:
    """Quantize both operands, multiply the dequantized values in float32."""
    direction = GemmDirection(direction)
    a, b = np.asarray(a), np.asarray(b)
    _check_shapes(a, b, direction)
    check_finite(a, "left operand")
    check_finite(b, "right operand")
    qa = fake_quantize(a, recipe_a)
    qb = fake_quantize(b, recipe_b)
    out = _product(qa, qb, direction).astype(np.float32, copy=False)
    return _add_bias(out, bias, direction)


@dataclass(frozen=True)
class ThroughputSample:
    elements_per_second: float
    median_latency: float
    repetitions: int

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if not self.median_latency > 0:
            raise ValueError("median_latency must be > 0")


# one measurement at a time, whatever thread asks
_BENCH_LOCK = threading.Lock()


def bench_throughput(
    spec: LayerSpec,
    recipe_a: QuantRecipe | None = None,
    recipe_b: QuantRecipe | None = None,
    direction: GemmDirection = GemmDirection.FORWARD,
    repetitions: int = 5,
    warmup: int = 1,
    seed: int = 0,
    end_to_end: bool = True,
) -> ThroughputSample:
    """Median wall-clock of quantize + multiply on dedicated random buffers.

    With no recipes the high-precision reference kernel is timed. A single
    recipe applies to both operands. ``end_to_end=False`` quantizes outside
    the timed region and measures the multiply alone.
    """
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    direction = GemmDirection(direction)
    if recipe_b is None:
        recipe_b = recipe_a
    shape_a, shape_b = spec.operand_shapes(direction)
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(shape_a, dtype=np.float32)
    b = rng.standard_normal(shape_b, dtype=np.float32)

    if recipe_a is None:
        def kernel():
            return gemm_ref(a, b, direction)
    elif end_to_end:
        def kernel():
            return gemm_lowprec(a, b, recipe_a, recipe_b, direction)
    else:
        qa, qb = fake_quantize(a, recipe_a), fake_quantize(b, recipe_b)

        def kernel():
            return _product(qa, qb, direction)

    latencies = []
    with _BENCH_LOCK, threadpool_limits(limits=1):
        for _ in range(warmup):
            kernel()
        for _ in range(repetitions):
            t0 = time.perf_counter()
            kernel()
            latencies.append(time.perf_counter() - t0)
    median = max(statistics.median(latencies), 1e-9)
    return ThroughputSample(spec.flops() / median, median, repetitions)
