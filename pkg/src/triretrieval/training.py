"""Staged cross-modal training: one encoder optimized per stage, the rest frozen.

A stage encodes all modalities for each batch, perturbs the active modality
with curriculum noise, applies the angular margin loss to that modality only,
fuses sketch and text into the composite query and contrasts it against the
image features. Only the active encoder and the class centers get updated.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from itertools import permutations
from typing import Callable

import numpy as np

from . import curriculum, encoders as enc_mod, losses, margin
from .datamodel import MODALITIES, ConfigError, DatasetTable, make_batches
from .encoders import EncoderState, FeatureBatch
from .retrieval import GalleryIndex, fuse, recall_table

logger = logging.getLogger(__name__)

LETTERS = {"S": "sketch", "I": "image", "T": "text"}
ORDERS = tuple("".join(p) for p in permutations("SIT"))


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageSpec:
    active: tuple[str, ...]
    epochs: int = 16

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs per stage must be >= 1")
        if not self.active or any(m not in MODALITIES for m in self.active):
            raise ConfigError(f"bad active modalities {self.active}")

    @property
    def active_modality(self) -> str:
        if len(self.active) != 1:
            raise StateError("joint stage has no single active modality")
        return self.active[0]

    # curriculum noise and the margin loss follow the trained encoder
    @property
    def cldre_targets(self) -> tuple[str, ...]:
        return self.active

    @property
    def ckfso_targets(self) -> tuple[str, ...]:
        return self.active

    @property
    def name(self) -> str:
        return "+".join(self.active)


@dataclass(frozen=True)
class StagePlan:
    stages: tuple[StageSpec, ...]
    order: str

    def __len__(self) -> int:
        return len(self.stages)


def build_plan(order: str = "SIT", epochs_per_stage: int = 16) -> StagePlan:
    if not isinstance(order, str) or sorted(order.upper()) != sorted("SIT"):
        raise ConfigError(f"order must be a permutation of S, I, T; got {order!r}")
    order = order.upper()
    return StagePlan(tuple(StageSpec((LETTERS[c],), epochs_per_stage) for c in order), order)


def joint_plan(epochs_per_stage: int = 16) -> StagePlan:
    """All encoders trained together for the same total number of epochs."""
    return StagePlan((StageSpec(MODALITIES, 3 * epochs_per_stage),), "joint")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 2e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if self.weight_decay < 0 or not self.eps > 0:
            raise ConfigError("weight_decay must be >= 0 and eps > 0")


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               moments: dict[str, tuple[np.ndarray, np.ndarray]], step_count: int,
               cfg: OptimizerConfig) -> int:
    """One in-place AdamW update; returns the incremented step count."""
    step = step_count + 1
    c1 = 1.0 - cfg.beta1 ** step
    c2 = 1.0 - cfg.beta2 ** step
    for name, p in params.items():
        g = grads[name]
        m, v = moments[name]
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: param {p.shape}, grad {g.shape}")
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p -= cfg.learning_rate * (cfg.weight_decay * p + update)
    return step


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    hidden_dim: int = 128
    embed_dim: int = 64
    cldre_alpha: float = 0.2
    cldre_enabled: bool = True
    ckfso_enabled: bool = True
    shared_bank: bool = True
    aaml: margin.AamlConfig = margin.AamlConfig()
    weights: losses.LossWeights = losses.LossWeights()
    contrastive: losses.ContrastiveConfig = losses.ContrastiveConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    query_modalities: tuple[str, ...] = ("sketch", "text")

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if not self.query_modalities or set(self.query_modalities) - {"sketch", "text"}:
            raise ConfigError("query modalities must be a non-empty subset of {sketch, text}")


@dataclass
class Model:
    encoders: dict[str, EncoderState]
    banks: dict[str, margin.CenterBank]
    bank_moments: dict[str, dict[str, tuple[np.ndarray, np.ndarray]]] = field(default_factory=dict)
    bank_steps: dict[str, int] = field(default_factory=dict)

    def bank_key(self, modality: str) -> str:
        return "shared" if "shared" in self.banks else modality

    def checksums(self) -> dict[str, str]:
        return {m: enc_mod.checksum(e) for m, e in self.encoders.items()}

    def centers(self) -> dict[str, np.ndarray]:
        return {k: b.centers for k, b in self.banks.items()}


def init_model(table: DatasetTable, cfg: TrainConfig, seed: int) -> Model:
    encs = {m: enc_mod.init_encoder(m, d, cfg.hidden_dim, cfg.embed_dim, seed=[seed, i])
            for i, (m, d) in enumerate(zip(MODALITIES, table.dims))}
    keys = ["shared"] if cfg.shared_bank else list(MODALITIES)
    banks = {k: margin.init_centers(table.num_categories, cfg.embed_dim, seed=[seed, 10 + i])
             for i, k in enumerate(keys)}
    moments = {k: {"centers": (np.zeros_like(b.centers), np.zeros_like(b.centers))} for k, b in banks.items()}
    return Model(encs, banks, moments, {k: 0 for k in banks})


@dataclass
class EpochRecord:
    stage: int
    stage_name: str
    epoch: int
    aaml: float
    infonce: float
    triplet: float
    total: float
    elapsed: float


@dataclass
class TrainReport:
    stage: int
    stage_name: str
    epochs: list[EpochRecord]
    checksums: dict[str, str]
    recall: dict[str, dict[int, float]] = field(default_factory=dict)
    t_trace: list[float] = field(default_factory=list)


def query_features(model: Model, table: DatasetTable, mask: tuple[str, ...]) -> FeatureBatch:
    return query_features_from({m: enc_mod.encode(model.encoders[m], table.views(m)) for m in mask}, mask)


EVAL_MASKS = {"fused": ("sketch", "text"), "sketch": ("sketch",), "text": ("text",)}


def evaluate(model: Model, table: DatasetTable, masks=("fused", "sketch", "text"),
             ks=(1, 5, 10)) -> dict[str, dict[int, float]]:
    """Noise-free Recall@K; the gallery is the table's own images, one truth per query."""
    gallery = GalleryIndex.build(enc_mod.encode(model.encoders["image"], table.views("image")), table.ids)
    return {mask: recall_table(query_features(model, table, EVAL_MASKS[mask]), gallery, table.ids, ks)
            for mask in masks}


def batch_objective(feats: dict[str, FeatureBatch], labels: np.ndarray, model: Model, stage: StageSpec,
                    cfg: TrainConfig):
    """Loss parts ``(aaml, infonce, triplet, total)`` for one batch, plus gradients
    of the total w.r.t. each modality's features and each center bank."""
    w = cfg.weights
    upstream = {m: np.zeros_like(f.values) for m, f in feats.items()}
    bank_grads: dict[str, np.ndarray] = {}

    l_aaml = 0.0
    targets = [m for m in stage.ckfso_targets if m in feats] if cfg.ckfso_enabled else []
    for m in targets:
        key = model.bank_key(m)
        l, gf, gc = margin.aaml_loss(feats[m], labels, model.banks[key], cfg.aaml)
        share = 1.0 / len(targets)
        l_aaml += share * l
        upstream[m] += w.lambda1 * share * gf
        bank_grads[key] = bank_grads.get(key, 0.0) + w.lambda1 * share * gc

    query = query_features_from(feats, cfg.query_modalities)
    l_nce, gq_nce, gg_nce = losses.info_nce(query, feats["image"], cfg.contrastive.temperature)
    l_tri, gq_tri, gg_tri = losses.triplet(query, feats["image"], cfg.contrastive.triplet_margin)
    gq = w.lambda2 * gq_nce + w.lambda3 * gq_tri
    for m in cfg.query_modalities:
        upstream[m] += gq
    upstream["image"] += w.lambda2 * gg_nce + w.lambda3 * gg_tri
    total = losses.total_loss(l_aaml, l_nce, l_tri, w)
    return (l_aaml, l_nce, l_tri, total), upstream, bank_grads


def run_stage(stage: StageSpec, train: DatasetTable, model: Model, cfg: TrainConfig, seed: int,
              stage_index: int = 0, eval_table: DatasetTable | None = None,
              eval_masks=("fused", "sketch", "text")) -> TrainReport:
    for m, e in model.encoders.items():
        if e.trainable != (m in stage.active):
            raise StateError(f"stage {stage.name}: encoder {m} trainable={e.trainable} contradicts the plan")

    views = {m: train.views(m) for m in MODALITIES}
    labels_all = train.categories
    used = tuple(cfg.query_modalities) + ("image",)
    noise_rng = np.random.default_rng([seed, stage_index, 7])
    n_batches = len(make_batches(train, cfg.batch_size, seed, 0))
    if n_batches == 0:
        raise ConfigError("training split too small for one batch")
    total_steps = stage.epochs * n_batches
    step = 0
    report = TrainReport(stage_index, stage.name, [], {})

    for epoch in range(stage.epochs):
        start = time.perf_counter()
        # frozen encoders do not change inside a stage, so encode them once per epoch
        frozen = {m: enc_mod.encode(model.encoders[m], views[m]).values
                  for m in used if m not in stage.active}
        sums = np.zeros(4)
        batches = make_batches(train, cfg.batch_size, seed, stage_index * 100_000 + epoch)
        for batch in batches:
            idx = batch.indices
            labels = labels_all[idx]
            t = curriculum.progress(step, max(total_steps - 1, 1))
            report.t_trace.append(t)
            feats = {}
            for m in used:
                f = (FeatureBatch(frozen[m][idx], m) if m in frozen
                     else enc_mod.encode(model.encoders[m], views[m][idx]))
                if m in stage.cldre_targets and cfg.cldre_enabled:
                    f = curriculum.inject(f, curriculum.CurriculumState(t, cfg.cldre_alpha), noise_rng)
                feats[m] = f
            (l_aaml, l_nce, l_tri, total), upstream, bank_grads = batch_objective(
                feats, labels, model, stage, cfg)

            for m in stage.active:
                e = model.encoders[m]
                if m not in feats or not e.trainable:
                    continue
                grads = enc_mod.backward(e, views[m][idx], upstream[m]).params()
                e.step_count = adamw_step(e.params, grads, e.moments, e.step_count, cfg.optimizer)
            for key, g in bank_grads.items():
                bank = model.banks[key]
                params = {"centers": bank.centers}
                model.bank_steps[key] = adamw_step(params, {"centers": g}, model.bank_moments[key],
                                                   model.bank_steps[key], cfg.optimizer)
                margin.normalize_centers(bank)
            sums += (l_aaml, l_nce, l_tri, total)
            step += 1
        means = sums / len(batches)
        if not np.all(np.isfinite(means)):
            raise FloatingPointError(f"non-finite loss in stage {stage.name}, epoch {epoch}")
        rec = EpochRecord(stage_index, stage.name, epoch, *map(float, means), time.perf_counter() - start)
        report.epochs.append(rec)
        logger.debug("stage %d (%s) epoch %d total %.5f", stage_index, stage.name, epoch, rec.total)

    report.checksums = model.checksums()
    if eval_table is not None:
        report.recall = evaluate(model, eval_table, eval_masks)
    return report


def query_features_from(feats: dict[str, FeatureBatch], modalities) -> FeatureBatch:
    out = feats[modalities[0]]
    for m in modalities[1:]:
        out = fuse(out, feats[m])
    return out


def run_pipeline(plan: StagePlan, train: DatasetTable, cfg: TrainConfig, seed: int,
                 eval_table: DatasetTable | None = None, model: Model | None = None,
                 on_stage_end: Callable[[int, StageSpec, Model, TrainReport], None] | None = None,
                 ) -> tuple[Model, list[TrainReport]]:
    model = model or init_model(train, cfg, seed)
    reports = []
    for i, stage in enumerate(plan.stages):
        for m, e in model.encoders.items():
            enc_mod.set_trainable(e, m in stage.active)
        before = model.checksums()
        report = run_stage(stage, train, model, cfg, seed, i, eval_table)
        for m in MODALITIES:
            if m not in stage.active and report.checksums[m] != before[m]:
                raise StateError(f"frozen encoder {m} changed during stage {stage.name}")
        reports.append(report)
        if on_stage_end is not None:
            on_stage_end(i, stage, model, report)
    for e in model.encoders.values():
        enc_mod.set_trainable(e, False)
    return model, reports
