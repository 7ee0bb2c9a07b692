"""MIL ranking objective for one (anomalous, normal) bag pair.

The hinge compares the top anomalous-segment score with either the top
normal-segment score (``original``) or the mean normal-segment score
(``mean_normal``). Smoothness and sparsity act on the anomalous bag only;
the weight penalty is the Frobenius norm of all weight matrices, biases
excluded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scorer import ModelParams

VARIANTS = ("original", "mean_normal")


@dataclass(frozen=True)
class LossConfig:
    variant: str = "original"
    lambda1: float = 8e-5
    lambda2: float = 8e-5
    lambda3: float = 0.001

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}; choose from {VARIANTS}")
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class PairLossResult:
    total: float
    rank_term: float
    smooth_term: float
    sparse_term: float
    weightnorm_term: float
    d_scores_anom: np.ndarray
    d_scores_norm: np.ndarray


def _as_scores(scores, name: str) -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D sequence")
    return arr


def rank_loss(scores_anom, scores_norm, variant: str = "original"):
    """Hinge ``max(0, 1 - max(anom) + agg(norm))`` with its score gradients.

    Ties in the argmax resolve to the lowest index; a margin of exactly zero
    takes the zero-gradient branch.
    """
    a = _as_scores(scores_anom, "scores_anom")
    b = _as_scores(scores_norm, "scores_norm")
    if a.size != b.size:
        raise ValueError(f"bag length mismatch: {a.size} anomalous vs {b.size} normal scores")
    if variant not in VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}")
    ia = int(np.argmax(a))
    if variant == "original":
        ib = int(np.argmax(b))
        agg = b[ib]
    else:
        agg = float(np.mean(b))
    margin = 1.0 - a[ia] + agg
    d_a = np.zeros_like(a)
    d_b = np.zeros_like(b)
    if margin <= 0:
        return 0.0, d_a, d_b
    d_a[ia] = -1.0
    if variant == "original":
        d_b[ib] = 1.0
    else:
        d_b[:] = 1.0 / b.size
    return float(margin), d_a, d_b


def smoothness_term(scores_anom):
    s = _as_scores(scores_anom, "scores_anom")
    diff = s[:-1] - s[1:]
    grad = np.zeros_like(s)
    grad[:-1] += 2.0 * diff
    grad[1:] -= 2.0 * diff
    return float(np.sum(diff * diff)), grad


def sparsity_term(scores_anom):
    s = _as_scores(scores_anom, "scores_anom")
    return float(np.sum(s)), np.ones_like(s)


def weight_norm_term(params: ModelParams):
    """Frobenius norm over all weight entries and its gradient (zero at the origin)."""
    value = math.sqrt(sum(float(np.sum(w * w)) for w in params.weights))
    grad = params.zeros_like()
    if value > 0:
        grad.weights = [w / value for w in params.weights]
    return value, grad


def pair_objective(scores_anom, scores_norm, params: ModelParams, cfg: LossConfig) -> PairLossResult:
    rank, d_a, d_b = rank_loss(scores_anom, scores_norm, cfg.variant)
    smooth, d_smooth = smoothness_term(scores_anom)
    sparse, d_sparse = sparsity_term(scores_anom)
    wnorm, _ = weight_norm_term(params)
    total = rank + cfg.lambda1 * smooth + cfg.lambda2 * sparse + cfg.lambda3 * wnorm
    return PairLossResult(
        total=total,
        rank_term=rank,
        smooth_term=smooth,
        sparse_term=sparse,
        weightnorm_term=wnorm,
        d_scores_anom=d_a + cfg.lambda1 * d_smooth + cfg.lambda2 * d_sparse,
        d_scores_norm=d_b,
    )
