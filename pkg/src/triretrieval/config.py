"""Run configuration: a flat mapping of dotted keys with typed defaults.

Config files are YAML. Either flat (``cldre.alpha: 0.2``) or nested
(``cldre: {alpha: 0.2}``) spelling is accepted; nested maps are flattened.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any, Iterable

import yaml

from . import losses, margin, training
from .datamodel import ConfigError, SynthConfig

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "data.manifest": None,
    "data.test_fraction": 0.5,
    "synth.num_categories": 64,
    "synth.instances_per_category": 8,
    "synth.latent_struct_dim": 8,
    "synth.latent_app_dim": 8,
    "synth.sketch_dim": 32,
    "synth.text_dim": 32,
    "synth.image_dim": 32,
    "synth.intra_class_spread": 0.3,
    "synth.view_noise_std": 0.05,
    "encoder.hidden_dim": 128,
    "encoder.embed_dim": 64,
    "cldre.enabled": True,
    "cldre.alpha": 0.2,
    "ckfso.enabled": True,
    "ckfso.s": 32.0,
    "ckfso.m": 0.15,
    "ckfso.shared_bank": True,
    "loss.lambda1": 0.1,
    "loss.lambda2": 0.8,
    "loss.lambda3": 0.8,
    "loss.temperature": 0.07,
    "loss.triplet_margin": 0.2,
    "mcfa.enabled": True,
    "mcfa.order": "SIT",
    "mcfa.epochs_per_stage": 16,
    "optimizer.learning_rate": 2e-5,
    "optimizer.weight_decay": 0.01,
    "optimizer.beta1": 0.9,
    "optimizer.beta2": 0.999,
    "optimizer.eps": 1e-8,
    "train.batch_size": 32,
    "query.sketch": True,
    "query.text": True,
    "output.dir": "runs/default",
    "output.plots": False,
}

# None-valued defaults still need a declared type
_TYPES = {"data.manifest": str}


class ConfigValidationError(ConfigError):
    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))


def flatten(mapping: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for key, value in mapping.items():
        full = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, f"{full}."))
        else:
            out[full] = value
    return out


def _coerce(key: str, value: Any, errors: list[str]) -> Any:
    kind = _TYPES.get(key) or type(DEFAULTS[key])
    if value is None:
        if DEFAULTS[key] is None:
            return None
        errors.append(f"{key}: value required")
        return DEFAULTS[key]
    if kind in (int, float) and isinstance(value, str):
        # YAML 1.1 reads exponent-only floats such as 2e-5 as strings
        try:
            value = kind(value)
        except ValueError:
            pass
    if kind is bool:
        if isinstance(value, bool):
            return value
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif kind is str:
        return str(value)
    errors.append(f"{key}: expected {kind.__name__}, got {value!r}")
    return DEFAULTS[key]


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def synth_config(self) -> SynthConfig:
        v = self.values
        return SynthConfig(
            num_categories=v["synth.num_categories"],
            instances_per_category=v["synth.instances_per_category"],
            latent_struct_dim=v["synth.latent_struct_dim"],
            latent_app_dim=v["synth.latent_app_dim"],
            view_dims=(v["synth.sketch_dim"], v["synth.text_dim"], v["synth.image_dim"]),
            intra_class_spread=v["synth.intra_class_spread"],
            view_noise_std=v["synth.view_noise_std"],
            seed=v["seed"],
        )

    def query_modalities(self) -> tuple[str, ...]:
        return tuple(m for m in ("sketch", "text") if self.values[f"query.{m}"])

    def train_config(self) -> training.TrainConfig:
        v = self.values
        return training.TrainConfig(
            batch_size=v["train.batch_size"],
            hidden_dim=v["encoder.hidden_dim"],
            embed_dim=v["encoder.embed_dim"],
            cldre_alpha=v["cldre.alpha"],
            cldre_enabled=v["cldre.enabled"],
            ckfso_enabled=v["ckfso.enabled"],
            shared_bank=v["ckfso.shared_bank"],
            aaml=margin.AamlConfig(v["ckfso.s"], v["ckfso.m"]),
            weights=losses.LossWeights(v["loss.lambda1"], v["loss.lambda2"], v["loss.lambda3"]),
            contrastive=losses.ContrastiveConfig(v["loss.temperature"], v["loss.triplet_margin"]),
            optimizer=training.OptimizerConfig(
                v["optimizer.learning_rate"], v["optimizer.weight_decay"],
                v["optimizer.beta1"], v["optimizer.beta2"], v["optimizer.eps"]),
            query_modalities=self.query_modalities(),
        )

    def plan(self) -> training.StagePlan:
        epochs = self.values["mcfa.epochs_per_stage"]
        plan = (training.build_plan(self.values["mcfa.order"], epochs) if self.values["mcfa.enabled"]
                else training.joint_plan(epochs))
        used = set(self.query_modalities()) | {"image"}
        # a stage for a modality that never enters the query has nothing to train
        stages = tuple(s for s in plan.stages if set(s.active) & used)
        return training.StagePlan(stages, plan.order)

    def with_overrides(self, **changes: Any) -> "RunConfig":
        return build_config({**self.values, **changes})

    def to_yaml(self) -> str:
        return yaml.safe_dump(dict(sorted(self.values.items())), sort_keys=False)


def build_config(raw: dict[str, Any]) -> RunConfig:
    errors: list[str] = []
    values = dict(DEFAULTS)
    for key, value in flatten(raw).items():
        if key not in DEFAULTS:
            errors.append(f"{key}: unknown key")
            continue
        values[key] = _coerce(key, value, errors)
    cfg = RunConfig(values)
    # semantic checks run only on well-typed values so messages stay readable
    if not errors:
        for check in (cfg.synth_config, cfg.train_config, cfg.plan):
            try:
                check()
            except (ValueError, TypeError) as exc:
                errors.append(str(exc))
        if not 0.0 < values["data.test_fraction"] < 1.0:
            errors.append("data.test_fraction: must lie in (0, 1)")
    if errors:
        raise ConfigValidationError(errors)
    return cfg


def parse_override(item: str) -> tuple[str, Any]:
    key, sep, text = item.partition("=")
    if not sep or not key.strip():
        raise ConfigValidationError([f"override {item!r} is not KEY=VALUE"])
    return key.strip(), yaml.safe_load(text)


def load_config(path: str | os.PathLike | None = None, overrides: Iterable[str] = (),
                extra: dict[str, Any] | None = None) -> RunConfig:
    raw: dict[str, Any] = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigValidationError([f"{path}: top level must be a mapping"])
        raw.update(flatten(loaded))
    raw.update(extra or {})
    for item in overrides:
        key, value = parse_override(item)
        raw[key] = value
    return build_config(raw)
