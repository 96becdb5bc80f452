"""Curriculum noise injection: feature noise whose scale grows with training progress."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import FeatureBatch


@dataclass(frozen=True)
class CurriculumState:
    t: float
    alpha: float = 0.2
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"progress t must lie in [0, 1], got {self.t}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")


def progress(step: int, total_steps: int) -> float:
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return step / total_steps


def inject(features: FeatureBatch, state: CurriculumState, draw: np.random.Generator) -> FeatureBatch:
    """Return ``f + t * alpha * eps`` with fresh standard-normal ``eps``.

    At ``t == 0`` or ``alpha == 0`` the input values come back untouched and
    nothing is drawn from ``draw``.
    """
    scale = state.t * state.alpha
    if scale == 0.0:
        return FeatureBatch(features.values.copy(), features.modality)
    eps = draw.standard_normal(features.values.shape)
    return FeatureBatch(features.values + scale * eps, features.modality)
