"""Additive angular margin loss over a learnable bank of class centers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._norm import DegenerateInputError, log_softmax, unit_rows, unit_rows_backward
from .encoders import FeatureBatch

CLAMP_EPS = 1e-7


@dataclass
class CenterBank:
    centers: np.ndarray

    def __post_init__(self) -> None:
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2 or self.centers.shape[0] < 2:
            raise ValueError("a center bank needs a (C, d) matrix with C >= 2")

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


@dataclass(frozen=True)
class AamlConfig:
    s: float = 32.0
    m: float = 0.15

    def __post_init__(self) -> None:
        if not self.s > 0:
            raise ValueError("scale s must be positive")
        if not 0.0 <= self.m < math.pi:
            raise ValueError("margin m must lie in [0, pi)")


def init_centers(num_classes: int, dim: int, seed: int = 0) -> CenterBank:
    rng = np.random.default_rng(seed)
    return normalize_centers(CenterBank(rng.standard_normal((num_classes, dim))))


def normalize_centers(bank: CenterBank) -> CenterBank:
    try:
        unit, _ = unit_rows(bank.centers, "center")
    except DegenerateInputError as exc:
        raise DegenerateInputError(f"degenerate center bank: {exc}") from None
    bank.centers = unit
    return bank


def _cosines(features: np.ndarray, centers: np.ndarray):
    u, fn = unit_rows(features, "feature row")
    w, cn = unit_rows(centers, "center")
    return np.clip(u @ w.T, -1.0, 1.0), (u, fn, w, cn)


def angles(features: FeatureBatch, bank: CenterBank) -> np.ndarray:
    cos, _ = _cosines(features.values, bank.centers)
    return np.arccos(np.clip(cos, -1.0 + CLAMP_EPS, 1.0 - CLAMP_EPS))


def margin_logit(cos: np.ndarray, m: float) -> tuple[np.ndarray, np.ndarray]:
    """``cos(theta + m)`` and its derivative w.r.t. ``cos(theta)``.

    Past ``theta + m > pi`` the value switches to ``cos(theta) - m*sin(m)`` so
    the logit stays monotone in theta. The value uses the exact sine; only the
    derivative sees the clamped one, which keeps it finite at theta = 0 or pi.
    """
    sin = np.sqrt(np.maximum(1.0 - cos * cos, 0.0))
    clamped = np.clip(cos, -1.0 + CLAMP_EPS, 1.0 - CLAMP_EPS)
    sin_safe = np.sqrt(1.0 - clamped * clamped)
    inside = cos > math.cos(math.pi - m)
    phi = np.where(inside, cos * math.cos(m) - sin * math.sin(m), cos - m * math.sin(m))
    dphi = np.where(inside, math.cos(m) + cos * math.sin(m) / sin_safe, 1.0)
    return phi, dphi


def aaml_loss(features: FeatureBatch, labels: np.ndarray, bank: CenterBank,
              cfg: AamlConfig = AamlConfig()) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean margin-softmax loss and its gradients w.r.t. features and centers."""
    f = features.values
    labels = np.asarray(labels, dtype=np.int64)
    n = f.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if n < 1:
        raise ValueError("aaml_loss needs at least one sample")
    if labels.min() < 0 or labels.max() >= bank.num_classes:
        raise IndexError(f"labels must lie in [0, {bank.num_classes})")

    cos, (u, fn, w, cn) = _cosines(f, bank.centers)
    rows = np.arange(n)
    phi, dphi = margin_logit(cos[rows, labels], cfg.m)
    logits = cfg.s * cos
    logits[rows, labels] = cfg.s * phi

    logp = log_softmax(logits)
    loss = -float(logp[rows, labels].mean())

    g = np.exp(logp)
    g[rows, labels] -= 1.0
    g /= n
    g *= cfg.s
    g[rows, labels] *= dphi

    grad_f = unit_rows_backward(u, fn, g @ w)
    grad_c = unit_rows_backward(w, cn, g.T @ u)
    return loss, grad_f, grad_c
