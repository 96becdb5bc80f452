"""Retrieval losses between fused queries and gallery features, and the weighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._norm import log_softmax, unit_rows, unit_rows_backward
from .datamodel import ConfigError
from .encoders import FeatureBatch


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.8
    lambda3: float = 0.8

    def __post_init__(self) -> None:
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.07
    triplet_margin: float = 0.2

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not self.triplet_margin > 0:
            raise ValueError("triplet margin must be positive")


def _pair_cosines(queries: FeatureBatch, gallery: FeatureBatch):
    q, g = queries.values, gallery.values
    if q.shape != g.shape:
        raise ValueError(f"queries {q.shape} and gallery {g.shape} must have equal shapes")
    if q.shape[0] < 2:
        raise ConfigError("contrastive losses need a batch of at least 2")
    qu, qn = unit_rows(q, "query")
    gu, gn = unit_rows(g, "gallery row")
    return qu @ gu.T, (qu, qn, gu, gn)


def _cosine_backward(dsim: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray]:
    qu, qn, gu, gn = cache
    return unit_rows_backward(qu, qn, dsim @ gu), unit_rows_backward(gu, gn, dsim.T @ qu)


def info_nce(queries: FeatureBatch, gallery: FeatureBatch, temperature: float = 0.07
             ) -> tuple[float, np.ndarray, np.ndarray]:
    """Symmetric InfoNCE; row i of ``gallery`` is the positive for query i.

    Returns ``(loss, grad_queries, grad_gallery)``.
    """
    sim, cache = _pair_cosines(queries, gallery)
    n = sim.shape[0]
    logits = sim / temperature
    lp_rows = log_softmax(logits, axis=1)
    lp_cols = log_softmax(logits, axis=0)
    diag = np.arange(n)
    loss = -0.5 * (lp_rows[diag, diag].mean() + lp_cols[diag, diag].mean())

    dlogits = np.exp(lp_rows) + np.exp(lp_cols)
    dlogits[diag, diag] -= 2.0
    dsim = dlogits / (2.0 * n * temperature)
    gq, gg = _cosine_backward(dsim, cache)
    return float(loss), gq, gg


def triplet(queries: FeatureBatch, gallery: FeatureBatch, margin: float = 0.2
            ) -> tuple[float, np.ndarray, np.ndarray]:
    """Cosine-distance triplet hinge with the hardest in-batch negative per query."""
    sim, cache = _pair_cosines(queries, gallery)
    n = sim.shape[0]
    diag = np.arange(n)
    masked = sim.copy()
    masked[diag, diag] = -np.inf
    neg = np.argmax(masked, axis=1)
    # (1 - pos) - (1 - neg) + margin
    hinge = sim[diag, neg] - sim[diag, diag] + margin
    active = hinge > 0
    loss = float(np.where(active, hinge, 0.0).mean())

    dsim = np.zeros_like(sim)
    dsim[diag[active], diag[active]] -= 1.0 / n
    dsim[diag[active], neg[active]] += 1.0 / n
    gq, gg = _cosine_backward(dsim, cache)
    return loss, gq, gg


def total_loss(l_aaml: float, l_infonce: float, l_triplet: float, w: LossWeights = LossWeights()) -> float:
    parts = (l_aaml, l_infonce, l_triplet)
    if not all(math.isfinite(x) for x in parts):
        raise FloatingPointError(f"non-finite loss component in {parts}")
    return w.lambda1 * l_aaml + w.lambda2 * l_infonce + w.lambda3 * l_triplet
