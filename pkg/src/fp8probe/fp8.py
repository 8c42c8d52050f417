"""Software emulation of OFP8 E4M3 / E5M2 and scaled matrix quantization.

Encoding is table driven: every format has at most 256 codes, so we decode
all of them once and encode by searching the sorted table of non-negative
finite values. Rounding is round-to-nearest, ties to the even code (for
adjacent codes in one binade the even code is the one with an even mantissa
LSB, and this also holds across binade edges).

    E4M3: bias 7, no infinities, S.1111.111 is NaN, max finite 448
    E5M2: bias 15, IEEE-like, exponent 11111 is Inf/NaN, max finite 57344

Recipes are written as ``<format>/<granularity>``, for example
``e4m3/tensorwise``, ``e5m2/rowwise`` or ``e4m3/blockwise:1x128``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import check_finite


@dataclass(frozen=True)
class Fp8Format:
    name: str
    exponent_bits: int
    mantissa_bits: int
    exponent_bias: int
    has_infinity: bool
    max_finite: float = field(init=False, compare=False)

    def __post_init__(self):
        if self.exponent_bits + self.mantissa_bits != 7:
            raise ValueError("exponent_bits + mantissa_bits must be 7")
        object.__setattr__(self, "max_finite", float(_tables(self).max_finite))

    def __str__(self) -> str:
        return self.name


def _decode_code(code: int, fmt: Fp8Format) -> float:
    e_bits, m_bits = fmt.exponent_bits, fmt.mantissa_bits
    sign = -1.0 if code & 0x80 else 1.0
    exp = (code >> m_bits) & ((1 << e_bits) - 1)
    man = code & ((1 << m_bits) - 1)
    exp_max = (1 << e_bits) - 1
    if fmt.has_infinity and exp == exp_max:
        return sign * math.inf if man == 0 else math.copysign(math.nan, sign)
    if not fmt.has_infinity and exp == exp_max and man == (1 << m_bits) - 1:
        return math.copysign(math.nan, sign)
    if exp == 0:
        return sign * man * 2.0 ** (1 - fmt.exponent_bias - m_bits)
    return sign * (1.0 + man / (1 << m_bits)) * 2.0 ** (exp - fmt.exponent_bias)


@dataclass(frozen=True)
class _Tables:
    values: np.ndarray  # decoded value of each of the 256 codes
    grid: np.ndarray  # non-negative finite values by code, plus one overflow slot
    mids: np.ndarray  # midpoints between consecutive grid entries, padded with inf
    max_code: int
    max_finite: float
    nan_code: int
    inf_code: int | None


@functools.lru_cache(maxsize=None)
def _tables(fmt: Fp8Format) -> _Tables:
    values = np.array([_decode_code(c, fmt) for c in range(256)], dtype=np.float64)
    positive = values[:128]
    finite_codes = [c for c in range(128) if np.isfinite(positive[c])]
    max_code = max(finite_codes)
    # codes 0..max_code are contiguous and strictly increasing in value
    assert finite_codes == list(range(max_code + 1))
    assert np.all(np.diff(positive[: max_code + 1]) > 0)
    top = positive[max_code]
    overflow_slot = top + (top - positive[max_code - 1])
    grid = np.append(positive[: max_code + 1], overflow_slot)
    mids = np.append((grid[:-1] + grid[1:]) / 2.0, np.inf)
    nan_code = next(c for c in range(127, -1, -1) if np.isnan(positive[c]))
    inf_code = next((c for c in range(128) if np.isinf(positive[c])), None)
    return _Tables(values, grid, mids, max_code, float(top), nan_code, inf_code)


E4M3 = Fp8Format("e4m3", exponent_bits=4, mantissa_bits=3, exponent_bias=7, has_infinity=False)
E5M2 = Fp8Format("e5m2", exponent_bits=5, mantissa_bits=2, exponent_bias=15, has_infinity=True)
FORMATS = {"e4m3": E4M3, "e5m2": E5M2}


def encode(values, fmt: Fp8Format, saturate: bool = True):
    """Round values to the nearest code (ties to even).

    Finite magnitudes past the rounding range of ``max_finite`` become
    ``±max_finite`` when ``saturate`` is set, otherwise Inf (E5M2) or NaN
    (E4M3). Infinite input stays infinite in E5M2; E4M3 has no infinity and
    treats it like any other overflow. Returns a
    uint8 array, or a plain int for scalar input.
    """
    t = _tables(fmt)
    x = np.asarray(values, dtype=np.float64)
    a = np.abs(x)
    nan = np.isnan(x)
    a_safe = np.where(nan, 0.0, a)

    lo = np.searchsorted(t.grid, a_safe, side="right") - 1
    lo = np.clip(lo, 0, t.max_code + 1)
    mid = t.mids[lo]
    hi = np.minimum(lo + 1, t.max_code + 1)
    code = np.where(a_safe > mid, hi, lo)
    tie = a_safe == mid
    code = np.where(tie, np.where(lo % 2 == 0, lo, hi), code)

    overflow = code > t.max_code
    if t.inf_code is not None:
        # infinities are exact values of the format, never clamped
        code = np.where(np.isinf(x), t.inf_code, code)
        overflow &= ~np.isinf(x)
    if saturate:
        code = np.where(overflow, t.max_code, code)
    else:
        special = t.inf_code if t.inf_code is not None else t.nan_code
        code = np.where(overflow, special, code)
    code = np.where(nan, t.nan_code, code)
    code = code | np.where(np.signbit(x), 0x80, 0)
    out = code.astype(np.uint8)
    return int(out) if out.ndim == 0 else out


def decode(codes, fmt: Fp8Format):
    """Exact value of each code as float64 (NaN codes decode to NaN)."""
    c = np.asarray(codes, dtype=np.uint8)
    out = _tables(fmt).values[c]
    return float(out) if out.ndim == 0 else out


def code_values(fmt: Fp8Format) -> np.ndarray:
    """Decoded value of all 256 codes, indexed by code."""
    return _tables(fmt).values.copy()


@dataclass(frozen=True)
class Granularity:
    kind: str  # "tensorwise" | "rowwise" | "blockwise"
    block_rows: int = 0
    block_cols: int = 0

    def __post_init__(self):
        if self.kind not in ("tensorwise", "rowwise", "blockwise"):
            raise ValueError(f"unknown granularity {self.kind!r}")
        if self.kind == "blockwise" and (self.block_rows < 1 or self.block_cols < 1):
            raise ValueError("blockwise block dimensions must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "Granularity":
        text = text.strip().lower()
        if text.startswith("blockwise"):
            _, _, dims = text.partition(":")
            try:
                bm, bn = (int(d) for d in dims.split("x"))
            except ValueError:
                raise ValueError(f"bad blockwise granularity {text!r}, expected blockwise:BMxBN") from None
            return cls("blockwise", bm, bn)
        return cls(text)

    def __str__(self) -> str:
        if self.kind == "blockwise":
            return f"blockwise:{self.block_rows}x{self.block_cols}"
        return self.kind


TENSORWISE = Granularity("tensorwise")
ROWWISE = Granularity("rowwise")


def blockwise(block_rows: int, block_cols: int) -> Granularity:
    return Granularity("blockwise", block_rows, block_cols)


# default block geometry: activations 1x128, weights 128x128
ACTIVATION_BLOCKS = blockwise(1, 128)
WEIGHT_BLOCKS = blockwise(128, 128)


@dataclass(frozen=True)
class QuantRecipe:
    format: Fp8Format
    granularity: Granularity = TENSORWISE
    saturate_on_overflow: bool = True

    @classmethod
    def parse(cls, text: str) -> "QuantRecipe":
        parts = text.strip().split("/")
        saturate = True
        if len(parts) > 1 and parts[-1] == "nosat":
            parts, saturate = parts[:-1], False
        if len(parts) > 2:
            raise ValueError(f"bad recipe {text!r}, expected <format>[/<granularity>][/nosat]")
        fmt_name = parts[0].lower()
        if fmt_name not in FORMATS:
            raise ValueError(f"unknown FP8 format {fmt_name!r} (expected one of {sorted(FORMATS)})")
        gran = Granularity.parse(parts[1]) if len(parts) == 2 else TENSORWISE
        return cls(FORMATS[fmt_name], gran, saturate)

    def __str__(self) -> str:
        s = f"{self.format.name}/{self.granularity}"
        return s if self.saturate_on_overflow else s + "/nosat"


@dataclass(frozen=True, eq=False)
class QuantizedMatrix:
    codes: np.ndarray  # uint8, shape (M, N)
    scales: np.ndarray  # float64; (1, 1), (M, 1) or (ceil(M/bm), ceil(N/bn))
    recipe: QuantRecipe

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape


def _as_matrix(m) -> np.ndarray:
    a = np.asarray(m)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def _block_counts(shape, g: Granularity) -> tuple[int, int]:
    rows, cols = shape
    return -(-rows // g.block_rows), -(-cols // g.block_cols)


def compute_scales(m, recipe: QuantRecipe) -> np.ndarray:
    """Per-granule ``amax / max_finite``; all-zero granules get scale 1."""
    a = _as_matrix(m)
    check_finite(a, "matrix")
    absm = np.abs(a.astype(np.float64))
    g = recipe.granularity
    if absm.size == 0:
        amax = np.zeros((1, 1))
    elif g.kind == "tensorwise":
        amax = absm.max().reshape(1, 1)
    elif g.kind == "rowwise":
        amax = absm.max(axis=1, keepdims=True)
    else:
        nbr, nbc = _block_counts(absm.shape, g)
        padded = np.zeros((nbr * g.block_rows, nbc * g.block_cols))
        padded[: absm.shape[0], : absm.shape[1]] = absm
        amax = padded.reshape(nbr, g.block_rows, nbc, g.block_cols).max(axis=(1, 3))
    scales = amax / recipe.format.max_finite
    return np.where(amax == 0.0, 1.0, scales)


def expand_scales(scales: np.ndarray, shape, g: Granularity) -> np.ndarray:
    """Broadcast granule scales to one scale per element."""
    if g.kind != "blockwise":
        return np.broadcast_to(scales, shape)
    full = np.repeat(np.repeat(scales, g.block_rows, axis=0), g.block_cols, axis=1)
    return full[: shape[0], : shape[1]]


def quantize(m, recipe: QuantRecipe) -> QuantizedMatrix:
    a = _as_matrix(m)
    scales = compute_scales(a, recipe)
    per_elem = expand_scales(scales, a.shape, recipe.granularity)
    codes = encode(a.astype(np.float64) / per_elem, recipe.format, recipe.saturate_on_overflow)
    return QuantizedMatrix(np.asarray(codes, dtype=np.uint8).reshape(a.shape), scales, recipe)


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    per_elem = expand_scales(q.scales, q.codes.shape, q.recipe.granularity)
    return (decode(q.codes, q.recipe.format) * per_elem).astype(np.float32)


def fake_quantize(m, recipe: QuantRecipe) -> np.ndarray:
    """``dequantize(quantize(m))`` as float32."""
    return dequantize(quantize(m, recipe))
