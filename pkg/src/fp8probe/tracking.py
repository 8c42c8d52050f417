"""Online distribution trackers for layer inputs and weights.

Inputs are modelled along the feature dimension only (batch rows treated as
independent draws) with a batched Welford merge of mean and scatter. Weights
are modelled as matrix-normal ``MN(mean, U, V)``, ``vec(W) ~ N(vec(mean), V kron U)``,
with an EMA flip-flop update of the Kronecker factors.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import CorruptSnapshot, InsufficientSamples, ShapeMismatch, check_finite
from .linalg import cholesky_jittered, jitter_for
from .persist import decode_array, encode_array, read_document, write_document

DEFAULT_MOMENTUM = 0.95
DEFAULT_EPSILON_REL = 1e-6


def _arrays_equal(a, b) -> bool:
    return a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)


@dataclass(eq=False)
class InputStats:
    n: int
    mean: np.ndarray  # (K,), float64
    scatter: np.ndarray  # (K, K) unnormalized, float64

    @classmethod
    def empty(cls, feature_dim: int) -> "InputStats":
        return cls(0, np.zeros(feature_dim), np.zeros((feature_dim, feature_dim)))

    @property
    def feature_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def covariance_defined(self) -> bool:
        return self.n >= 2

    def __eq__(self, other) -> bool:
        if not isinstance(other, InputStats):
            return NotImplemented
        return (
            self.n == other.n
            and _arrays_equal(self.mean, other.mean)
            and _arrays_equal(self.scatter, other.scatter)
        )


def input_update(stats: InputStats, batch) -> InputStats:
    """Merge a (B, K) batch into the running mean and scatter."""
    x = np.asarray(batch)
    if x.ndim != 2 or x.shape[1] != stats.feature_dim:
        raise ShapeMismatch(f"batch shape {x.shape} does not match feature_dim {stats.feature_dim}")
    check_finite(x, "batch")
    b = x.shape[0]
    if b == 0:
        return copy.deepcopy(stats)
    x = x.astype(np.float64)
    mu_b = x.mean(axis=0)
    centered = x - mu_b
    s_b = centered.T @ centered
    n_new = stats.n + b
    delta = mu_b - stats.mean
    mean = stats.mean + (b / n_new) * delta
    scatter = stats.scatter + s_b + (stats.n * b / n_new) * np.outer(delta, delta)
    return InputStats(n_new, mean, 0.5 * (scatter + scatter.T))


def input_covariance(stats: InputStats) -> np.ndarray:
    """Unbiased sample covariance ``scatter / (n - 1)``."""
    if stats.n < 2:
        raise InsufficientSamples(f"covariance needs n >= 2, have n = {stats.n}")
    return stats.scatter / (stats.n - 1)


@dataclass(eq=False)
class WeightStats:
    mean: np.ndarray  # (M, N)
    row_cov: np.ndarray  # U, (M, M)
    col_cov: np.ndarray  # V, (N, N)
    momentum: float = DEFAULT_MOMENTUM
    epsilon_rel: float = DEFAULT_EPSILON_REL
    update_count: int = 0

    def __post_init__(self):
        if not 0.9 <= self.momentum <= 0.99:
            raise ValueError(f"momentum must lie in [0.9, 0.99], got {self.momentum}")
        m, n = self.mean.shape
        if self.row_cov.shape != (m, m) or self.col_cov.shape != (n, n):
            raise ShapeMismatch("row/column covariance shapes do not match the mean")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mean.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightStats):
            return NotImplemented
        return (
            _arrays_equal(self.mean, other.mean)
            and _arrays_equal(self.row_cov, other.row_cov)
            and _arrays_equal(self.col_cov, other.col_cov)
            and self.momentum == other.momentum
            and self.epsilon_rel == other.epsilon_rel
            and self.update_count == other.update_count
        )


def weight_init(w, momentum: float = DEFAULT_MOMENTUM, epsilon_rel: float = DEFAULT_EPSILON_REL) -> WeightStats:
    """Start tracking from a first observed weight: identity U and V."""
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeMismatch(f"weight must be 2-D, got shape {w.shape}")
    check_finite(w, "weight")
    m, n = w.shape
    return WeightStats(w.astype(np.float64), np.eye(m), np.eye(n), momentum, epsilon_rel, 0)


def weight_update(stats: WeightStats, w) -> WeightStats:
    """One EMA flip-flop step of (U, V) followed by trace renormalization."""
    w = np.asarray(w)
    if w.shape != stats.shape:
        raise ShapeMismatch(f"weight shape {w.shape} does not match tracked shape {stats.shape}")
    check_finite(w, "weight")
    rows, cols = stats.shape
    m, eps = stats.momentum, stats.epsilon_rel
    w64 = w.astype(np.float64)
    centered = w64 - stats.mean

    # U' = (1/N) Wt Wt^T with Wt = Wc L_V^{-T}
    chol_v = cholesky_jittered(stats.col_cov, eps)
    w_tilde = solve_triangular(chol_v, centered.T, lower=True).T
    u_step = (w_tilde @ w_tilde.T) / cols
    # V' = (1/M) Wh^T Wh with Wh = L_U^{-1} Wc
    chol_u = cholesky_jittered(stats.row_cov, eps)
    w_hat = solve_triangular(chol_u, centered, lower=True)
    v_step = (w_hat.T @ w_hat) / rows

    u = m * stats.row_cov + (1.0 - m) * u_step
    v = m * stats.col_cov + (1.0 - m) * v_step
    u = 0.5 * (u + u.T)
    v = 0.5 * (v + v.T)
    u += jitter_for(u, eps) * np.eye(rows)
    v += jitter_for(v, eps) * np.eye(cols)

    s = np.trace(u) / rows
    u /= s
    v *= s

    mean = m * stats.mean + (1.0 - m) * w64
    return WeightStats(mean, u, v, m, eps, stats.update_count + 1)


@dataclass(frozen=True)
class ProbeSchedule:
    activate_every: int = 100
    snapshot_every: int = 10_000

    def __post_init__(self):
        if self.activate_every < 1 or self.snapshot_every < 1:
            raise ValueError("schedule periods must be >= 1")
        if self.snapshot_every % self.activate_every:
            raise ValueError("snapshot_every must be a multiple of activate_every")

    def is_active(self, step: int) -> bool:
        """Whether the trackers run at 1-based training ``step``."""
        return step % self.activate_every == 0

    def is_snapshot(self, step: int) -> bool:
        return step % self.snapshot_every == 0


@dataclass
class Snapshot:
    """A tracker state plus the bookkeeping that travels with it on disk."""

    stats: InputStats | WeightStats
    layer: str = ""
    step: int = 0


def _stats_body(stats) -> dict:
    if isinstance(stats, InputStats):
        return {
            "dims": {"feature_dim": stats.feature_dim},
            "counters": {"n": int(stats.n)},
            "arrays": {"mean": encode_array(stats.mean), "scatter": encode_array(stats.scatter)},
        }
    if isinstance(stats, WeightStats):
        rows, cols = stats.shape
        return {
            "dims": {"rows": rows, "cols": cols},
            "counters": {"update_count": int(stats.update_count)},
            "config": {"momentum": float(stats.momentum), "epsilon_rel": float(stats.epsilon_rel)},
            "arrays": {
                "mean": encode_array(stats.mean),
                "row_cov": encode_array(stats.row_cov),
                "col_cov": encode_array(stats.col_cov),
            },
        }
    raise TypeError(f"cannot snapshot {type(stats).__name__}")


def snapshot_save(stats, path, layer: str = "", step: int = 0) -> str:
    """Write tracker state; returns the content hash."""
    kind = "input" if isinstance(stats, InputStats) else "weight"
    body = _stats_body(stats)
    body["layer"] = layer
    body["step"] = int(step)
    return write_document(path, kind, body)


def snapshot_load(path, with_meta: bool = False):
    """Read tracker state written by :func:`snapshot_save`."""
    body, env = read_document(path)
    kind = env["kind"]
    try:
        arrays = {k: decode_array(v) for k, v in body["arrays"].items()}
        if kind == "input":
            stats = InputStats(int(body["counters"]["n"]), arrays["mean"], arrays["scatter"])
        elif kind == "weight":
            stats = WeightStats(
                arrays["mean"],
                arrays["row_cov"],
                arrays["col_cov"],
                float(body["config"]["momentum"]),
                float(body["config"]["epsilon_rel"]),
                int(body["counters"]["update_count"]),
            )
        else:
            raise CorruptSnapshot(f"{path}: {kind!r} is not a snapshot kind")
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptSnapshot(f"{path}: malformed snapshot body ({exc})") from None
    if with_meta:
        return Snapshot(stats, body.get("layer", ""), int(body.get("step", 0)))
    return stats
