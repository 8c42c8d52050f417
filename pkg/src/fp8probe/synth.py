"""Synthetic activation/weight streams standing in for training traces.

Three input families:

normal      iid N(0, 1) features.
correlated  N(0, C) with Toeplitz ``C[i, j] = rho ** |i - j|``.
heavy       correlated, with feature standard deviations log-spaced over
            ``scale_decades`` decades (randomly permuted per layer) and a
            mean offset of ``mean_shift`` feature standard deviations.

Weights are matrix-normal with Toeplitz row and column covariances built
from ``weight_rho`` and overall scale ``weight_scale``. For ``heavy`` inputs
with a mean offset, every weight row is additionally projected orthogonal to
the input mean, the way a trained layer learns to ignore a constant offset of
its input. The offset then still inflates operand magnitudes (and so FP8
rounding error, which is relative to magnitude) without adding output signal.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .sampling import Rng

KINDS = ("normal", "correlated", "heavy")


@dataclass(frozen=True)
class Distribution:
    kind: str = "normal"
    rho: float = 0.0
    scale_decades: float = 0.0
    mean_shift: float = 0.0
    weight_rho: float = 0.0
    weight_scale: float = 0.05

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distribution kind {self.kind!r} (expected one of {KINDS})")
        if not (-1.0 < self.rho < 1.0 and -1.0 < self.weight_rho < 1.0):
            raise ValueError("correlations must lie in (-1, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "Distribution":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


HEAVY_DEFAULT = Distribution("heavy", rho=0.5, scale_decades=3.0, mean_shift=1.0, weight_rho=0.3)


def toeplitz_cov(dim: int, rho: float) -> np.ndarray:
    idx = np.arange(dim)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def feature_scales(dist: Distribution, feature_dim: int, rng: Rng) -> np.ndarray:
    """Per-feature standard deviations of the input stream."""
    if dist.kind != "heavy":
        return np.ones(feature_dim)
    std = np.logspace(0.0, -dist.scale_decades, feature_dim)
    # fixed permutation so large and small features interleave
    order = np.argsort(rng.spawn("feature-order").normal(feature_dim), kind="stable")
    return std[order]


def input_moments(dist: Distribution, feature_dim: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth (mean, covariance) of a layer's input stream."""
    if dist.kind == "normal":
        return np.zeros(feature_dim), np.eye(feature_dim)
    corr = toeplitz_cov(feature_dim, dist.rho)
    std = feature_scales(dist, feature_dim, rng)
    return dist.mean_shift * std, corr * np.outer(std, std)


class LayerStream:
    """Random-access synthetic data for one layer: step -> (inputs, weight)."""

    def __init__(self, dist: Distribution, batch: int, in_features: int, out_features: int, rng: Rng):
        self.dist = dist
        self.batch = batch
        self.shape = (out_features, in_features)
        self.rng = rng
        self.mean, cov = input_moments(dist, in_features, rng)
        self._chol_x = np.linalg.cholesky(cov + 1e-12 * np.eye(in_features))
        self._chol_u = np.linalg.cholesky(toeplitz_cov(out_features, dist.weight_rho))
        chol_v = np.linalg.cholesky(toeplitz_cov(in_features, dist.weight_rho))
        if dist.kind == "heavy" and np.any(self.mean):
            u = self.mean / np.linalg.norm(self.mean)
            chol_v = chol_v - np.outer(u, u @ chol_v)  # (I - u u^T) L_V
        self._chol_v = chol_v

    def inputs(self, step: int) -> np.ndarray:
        z = self.rng.spawn(f"x/{step}").normal((self.batch, self.shape[1]))
        return (self.mean + z @ self._chol_x.T).astype(np.float32)

    def weight(self, step: int) -> np.ndarray:
        z = self.rng.spawn(f"w/{step}").normal(self.shape)
        return (self.dist.weight_scale * (self._chol_u @ z @ self._chol_v.T)).astype(np.float32)
