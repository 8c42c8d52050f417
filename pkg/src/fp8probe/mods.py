"""Reference math for low-precision-friendly layer modifications.

BlockNorm is an unparameterized RMSNorm applied independently to fixed-size
blocks of the feature dimension (equivalently, grouped RMSNorm with no gain).
Hard Swish, ``x * relu6(x + 3) / 6``, replaces the sigmoid-based Swish.
Backward functions return the gradient with respect to ``x`` given the
upstream gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IndivisibleFeatureDim, ShapeMismatch


@dataclass(frozen=True)
class BlockNormConfig:
    block_size: int = 256
    eps: float = 1e-6

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")


def rmsnorm(x, eps: float = 1e-6) -> np.ndarray:
    """``x / sqrt(mean(x**2) + eps)`` over the last axis, no learned gain."""
    x = np.asarray(x)
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + eps)


def _blocks(x: np.ndarray, cfg: BlockNormConfig) -> np.ndarray:
    if x.ndim != 2:
        raise ShapeMismatch(f"expected a (B, N) matrix, got shape {x.shape}")
    if x.shape[1] % cfg.block_size:
        raise IndivisibleFeatureDim(f"feature dim {x.shape[1]} is not a multiple of block_size {cfg.block_size}")
    return x.reshape(-1, cfg.block_size)


def blocknorm_forward(x, cfg: BlockNormConfig = BlockNormConfig()) -> np.ndarray:
    x = np.asarray(x)
    return rmsnorm(_blocks(x, cfg), cfg.eps).reshape(x.shape)


def blocknorm_backward(x, upstream_grad, cfg: BlockNormConfig = BlockNormConfig()) -> np.ndarray:
    x = np.asarray(x)
    g = np.asarray(upstream_grad)
    if g.shape != x.shape:
        raise ShapeMismatch(f"upstream_grad shape {g.shape} does not match x shape {x.shape}")
    xb = _blocks(x, cfg)
    gb = g.reshape(xb.shape)
    # dy_i/dx_j = delta_ij / r - x_i x_j / (L r^3),  r = sqrt(mean(x^2) + eps)
    r = np.sqrt(np.mean(xb * xb, axis=-1, keepdims=True) + cfg.eps)
    dot = np.sum(gb * xb, axis=-1, keepdims=True)
    grad = gb / r - xb * dot / (cfg.block_size * r**3)
    return grad.reshape(x.shape)


def relu6(x) -> np.ndarray:
    return np.minimum(np.maximum(x, 0.0), 6.0)


def swish_ref(x) -> np.ndarray:
    """``x * sigmoid(x)``, evaluated without overflow for large |x|."""
    x = np.asarray(x)
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return x * sig


def hardswish_forward(x) -> np.ndarray:
    x = np.asarray(x)
    return x * relu6(x + 3.0) / 6.0


def hardswish_backward(x, upstream_grad) -> np.ndarray:
    """Derivative uses the right limit at the breakpoints -3 and 3."""
    x = np.asarray(x)
    deriv = np.where(x < -3.0, 0.0, np.where(x < 3.0, (2.0 * x + 3.0) / 6.0, 1.0))
    return np.asarray(upstream_grad) * deriv
