"""Jittered Cholesky factorization shared by the trackers and samplers."""

from __future__ import annotations

import numpy as np

from .errors import NotPositiveDefinite, ShapeMismatch


def jitter_for(a: np.ndarray, epsilon_rel: float) -> float:
    """``epsilon_rel * trace(a) / dim``; a zero-trace matrix uses a unit base."""
    base = float(np.trace(a)) / a.shape[0]
    if not base > 0.0:
        base = 1.0
    return epsilon_rel * base


def cholesky_jittered(a, epsilon_rel: float = 1e-6, max_escalations: int = 4) -> np.ndarray:
    """Lower factor L with ``L @ L.T = sym(a) + eps I``.

    On failure eps grows tenfold, at most ``max_escalations`` times.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got shape {a.shape}")
    sym = 0.5 * (a + a.T)
    eps = jitter_for(sym, epsilon_rel)
    eye = np.eye(a.shape[0])
    for _ in range(max_escalations + 1):
        try:
            return np.linalg.cholesky(sym + eps * eye)
        except np.linalg.LinAlgError:
            eps *= 10.0
    raise NotPositiveDefinite(
        f"Cholesky failed for {a.shape[0]}x{a.shape[0]} matrix after {max_escalations} jitter escalations"
    )
