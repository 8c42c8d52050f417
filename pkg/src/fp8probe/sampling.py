"""Synthesize activations and weights from tracked Gaussian statistics.

Random numbers come from a fixed pipeline so that a seed means the same
stream everywhere:

1. Philox4x64-10 counter-based generator, key = ``seed | stream << 64``,
   counter starting at zero (``numpy.random.Philox``; its raw output is
   stable across numpy versions and platforms).
2. Each raw 64-bit word keeps its top 53 bits to form a uniform double,
   ``u1 = ((r1 >> 11) + 1) / 2**53`` in (0, 1] and ``u2 = (r2 >> 11) / 2**53``.
3. Box-Muller: ``sqrt(-2 ln u1) * cos(2 pi u2)`` and ``... * sin(2 pi u2)``
   give two standard normals per pair of words, emitted interleaved.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import InsufficientSamples
from .linalg import cholesky_jittered, jitter_for  # noqa: F401
from .tracking import InputStats, WeightStats, input_covariance

_MASK64 = (1 << 64) - 1
_TWO_M53 = 2.0 ** -53


class Rng:
    """Deterministic standard-normal source. Not safe to share across threads."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._bitgen = np.random.Philox(key=self.seed | (self.stream << 64))
        self._spare: np.ndarray = np.empty(0)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def spawn(self, name) -> "Rng":
        """Child generator on a sub-stream derived from this stream and ``name``.

        The child stream id is the first 8 bytes (little-endian) of
        BLAKE2b-64 over ``"<parent stream>/<name>"``.
        """
        digest = hashlib.blake2b(f"{self.stream}/{name}".encode("utf-8"), digest_size=8).digest()
        return Rng(self.seed, int.from_bytes(digest, "little"))

    def _pairs(self, n_pairs: int) -> np.ndarray:
        raw = self._bitgen.random_raw(2 * n_pairs).reshape(n_pairs, 2)
        u1 = ((raw[:, 0] >> np.uint64(11)).astype(np.float64) + 1.0) * _TWO_M53
        u2 = (raw[:, 1] >> np.uint64(11)).astype(np.float64) * _TWO_M53
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        return np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1).ravel()

    def normal(self, shape) -> np.ndarray:
        """Standard normal float64 array of the given shape."""
        n = int(np.prod(shape, dtype=np.int64))
        need = n - self._spare.size
        if need > 0:
            fresh = self._pairs((need + 1) // 2)
            pool = np.concatenate([self._spare, fresh])
        else:
            pool = self._spare
        out, self._spare = pool[:n], pool[n:]
        return out.reshape(shape)


def sample_input(stats: InputStats, batch: int, rng: Rng, epsilon_rel: float = 1e-6) -> np.ndarray:
    """Draw a (batch, K) activation matrix: ``mean + Z @ L.T``."""
    if stats.n < 2:
        raise InsufficientSamples(f"need at least 2 tracked rows to sample, have {stats.n}")
    chol = cholesky_jittered(input_covariance(stats), epsilon_rel)
    z = rng.normal((batch, stats.feature_dim))
    return (stats.mean[None, :] + z @ chol.T).astype(np.float32)


def sample_weight(stats: WeightStats, rng: Rng, epsilon_rel: float | None = None) -> np.ndarray:
    """Draw an (M, N) weight: ``mean + L_U @ Z @ L_V.T``."""
    eps = stats.epsilon_rel if epsilon_rel is None else epsilon_rel
    chol_u = cholesky_jittered(stats.row_cov, eps)
    chol_v = cholesky_jittered(stats.col_cov, eps)
    z = rng.normal(stats.mean.shape)
    return (stats.mean + chol_u @ z @ chol_v.T).astype(np.float32)


def standard_input_stats(feature_dim: int) -> InputStats:
    """Stats describing N(0, I): used as the 'standard benchmark' input distribution."""
    return InputStats(n=2, mean=np.zeros(feature_dim), scatter=np.eye(feature_dim))
