"""Tri-modal (sketch, text, image) sample tables, manifest I/O and batching.

A manifest is a JSON-lines file, one sample per line::

    {"instance_id": 0, "category": 3, "split": "train",
     "sketch": [...], "text": [...], "image": [...]}

Views are precomputed numeric vectors; no media decoding happens here.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")
MODALITIES = ("sketch", "text", "image")


class ManifestError(ValueError):
    """A manifest line could not be parsed."""


class SchemaError(ValueError):
    """Records violate the table invariants (dims, categories, ids)."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TriModalSample:
    instance_id: int
    sketch_view: np.ndarray
    text_view: np.ndarray
    image_view: np.ndarray
    category: int
    split: str = "train"

    def view(self, modality: str) -> np.ndarray:
        return getattr(self, f"{modality}_view")

    def with_split(self, split: str) -> "TriModalSample":
        return TriModalSample(self.instance_id, self.sketch_view, self.text_view,
                              self.image_view, self.category, split)


@dataclass
class DatasetTable:
    samples: list[TriModalSample]
    num_categories: int
    dims: tuple[int, int, int]
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        validate_samples(self.samples, self.num_categories)

    def __len__(self) -> int:
        return len(self.samples)

    def views(self, modality: str) -> np.ndarray:
        """Stacked ``(N, v)`` float64 matrix of one modality's views."""
        if modality not in MODALITIES:
            raise KeyError(modality)
        if modality not in self._cache:
            self._cache[modality] = np.stack([s.view(modality) for s in self.samples])
        return self._cache[modality]

    @cached_property
    def categories(self) -> np.ndarray:
        return np.array([s.category for s in self.samples], dtype=np.int64)

    @cached_property
    def ids(self) -> np.ndarray:
        return np.array([s.instance_id for s in self.samples], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "DatasetTable":
        return DatasetTable([self.samples[i] for i in indices], self.num_categories, self.dims)

    def where_split(self, split: str) -> "DatasetTable":
        return DatasetTable([s for s in self.samples if s.split == split],
                            self.num_categories, self.dims)

    def splits(self) -> set[str]:
        return {s.split for s in self.samples}

    def equals(self, other: "DatasetTable") -> bool:
        if (self.num_categories, self.dims, len(self)) != (other.num_categories, other.dims, len(other)):
            return False
        for a, b in zip(self.samples, other.samples):
            if (a.instance_id, a.category, a.split) != (b.instance_id, b.category, b.split):
                return False
            if any(not np.array_equal(a.view(m), b.view(m)) for m in MODALITIES):
                return False
        return True


def validate_samples(samples: Sequence[TriModalSample], num_categories: int) -> None:
    if not samples:
        raise SchemaError("dataset is empty")
    dims = tuple(samples[0].view(m).shape for m in MODALITIES)
    seen: set[int] = set()
    for s in samples:
        for m, d in zip(MODALITIES, dims):
            if s.view(m).shape != d:
                raise SchemaError(
                    f"instance {s.instance_id}: {m} view has shape {s.view(m).shape}, expected {d}")
        if not 0 <= s.category < num_categories:
            raise SchemaError(f"instance {s.instance_id}: category {s.category} outside [0, {num_categories})")
        if s.split not in SPLITS:
            raise SchemaError(f"instance {s.instance_id}: unknown split {s.split!r}")
        if s.instance_id in seen:
            raise SchemaError(f"duplicate instance_id {s.instance_id}")
        seen.add(s.instance_id)


def _parse_record(line: str, lineno: int) -> TriModalSample:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(rec, dict):
        raise ManifestError(f"line {lineno}: record is not an object")
    missing = [k for k in ("instance_id", "category", "split", "sketch", "text", "image") if k not in rec]
    if missing:
        raise ManifestError(f"line {lineno}: missing fields {missing}")
    try:
        views = {m: np.asarray(rec[m], dtype=np.float64) for m in MODALITIES}
        iid, cat = rec["instance_id"], rec["category"]
        if isinstance(iid, bool) or isinstance(cat, bool) or int(iid) != iid or int(cat) != cat:
            raise TypeError("instance_id and category must be integers")
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"line {lineno}: {exc}") from exc
    for m, v in views.items():
        if v.ndim != 1 or v.size == 0:
            raise ManifestError(f"line {lineno}: {m} must be a non-empty array of numbers")
        if not np.all(np.isfinite(v)):
            raise ManifestError(f"line {lineno}: {m} contains non-finite values")
    if int(cat) < 0:
        raise SchemaError(f"line {lineno}: category {cat} is negative")
    return TriModalSample(int(iid), views["sketch"], views["text"], views["image"], int(cat), str(rec["split"]))


def load_manifest(path: str | os.PathLike) -> DatasetTable:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                samples.append(_parse_record(line, lineno))
    if not samples:
        raise SchemaError(f"{path}: no records")
    dims = tuple(int(samples[0].view(m).size) for m in MODALITIES)
    return DatasetTable(samples, max(s.category for s in samples) + 1, dims)


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_manifest(table: DatasetTable) -> str:
    lines = []
    for s in table.samples:
        rec = {"instance_id": s.instance_id, "category": s.category, "split": s.split}
        # repr-exact floats so a round trip is bit-identical
        rec.update({m: s.view(m).tolist() for m in MODALITIES})
        lines.append(json.dumps(rec))
    return "\n".join(lines) + "\n"


def write_manifest(table: DatasetTable, path: str | os.PathLike) -> None:
    atomic_write(path, dump_manifest(table))


@dataclass(frozen=True)
class SynthConfig:
    num_categories: int = 64
    instances_per_category: int = 8
    latent_struct_dim: int = 8
    latent_app_dim: int = 8
    view_dims: tuple[int, int, int] = (32, 32, 32)
    intra_class_spread: float = 0.3
    view_noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        ints = [self.num_categories, self.instances_per_category, self.latent_struct_dim,
                self.latent_app_dim, *self.view_dims]
        if any(int(v) < 1 for v in ints):
            raise ConfigError("synthetic dataset dimensions and counts must all be >= 1")
        if not self.intra_class_spread > 0:
            raise ConfigError("intra_class_spread must be positive")
        if self.view_noise_std < 0:
            raise ConfigError("view_noise_std must be non-negative")


def synth_latents(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-instance latents ``z`` (struct dims first) and their category labels."""
    rng = np.random.default_rng([cfg.seed, 0])
    k = cfg.latent_struct_dim + cfg.latent_app_dim
    protos = rng.standard_normal((cfg.num_categories, k))
    labels = np.repeat(np.arange(cfg.num_categories), cfg.instances_per_category)
    z = protos[labels] + cfg.intra_class_spread * rng.standard_normal((labels.size, k))
    return z, labels


def synth_lifts(cfg: SynthConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([cfg.seed, 1])
    k = cfg.latent_struct_dim + cfg.latent_app_dim
    return {m: rng.standard_normal((v, k)) / np.sqrt(k) for m, v in zip(MODALITIES, cfg.view_dims)}


def render_views(z: np.ndarray, cfg: SynthConfig, lifts: dict[str, np.ndarray],
                 rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Project latents into the three views.

    Sketches only see the structure block, text only the appearance block.
    """
    ds = cfg.latent_struct_dim
    struct_only = z.copy()
    struct_only[:, ds:] = 0.0
    app_only = z.copy()
    app_only[:, :ds] = 0.0
    sources = {"sketch": struct_only, "text": app_only, "image": z}
    out = {}
    for m in MODALITIES:
        clean = sources[m] @ lifts[m].T
        out[m] = clean + cfg.view_noise_std * rng.standard_normal(clean.shape)
    return out


def synthesize_dataset(cfg: SynthConfig) -> DatasetTable:
    z, labels = synth_latents(cfg)
    views = render_views(z, cfg, synth_lifts(cfg), np.random.default_rng([cfg.seed, 2]))
    samples = [
        TriModalSample(i, views["sketch"][i], views["text"][i], views["image"][i], int(labels[i]))
        for i in range(labels.size)
    ]
    return DatasetTable(samples, cfg.num_categories, tuple(cfg.view_dims))


def split(table: DatasetTable, test_fraction: float, seed: int) -> tuple[DatasetTable, DatasetTable]:
    """Stratified train/test split; the returned samples carry the new split tag."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    cats = table.categories
    is_test = np.zeros(len(table), dtype=bool)
    for c in range(table.num_categories):
        idx = np.flatnonzero(cats == c)
        if idx.size == 0:
            continue
        n_test = int(round(test_fraction * idx.size))
        if n_test >= idx.size:
            logger.warning("category %d has no training samples after split", c)
        is_test[rng.permutation(idx)[:n_test]] = True
    train = [s.with_split("train") for s, t in zip(table.samples, is_test) if not t]
    test = [s.with_split("test") for s, t in zip(table.samples, is_test) if t]
    if not train or not test:
        raise ConfigError("split leaves one side empty")
    return (DatasetTable(train, table.num_categories, table.dims),
            DatasetTable(test, table.num_categories, table.dims))


def merge(*tables: DatasetTable) -> DatasetTable:
    samples = [s for t in tables for s in t.samples]
    samples.sort(key=lambda s: s.instance_id)
    return DatasetTable(samples, max(t.num_categories for t in tables), tables[0].dims)


@dataclass(frozen=True)
class Batch:
    indices: np.ndarray

    def __len__(self) -> int:
        return int(self.indices.size)


def make_batches(table: DatasetTable | int, batch_size: int, seed: int, epoch: int) -> list[Batch]:
    """Shuffle per (seed, epoch) and chunk; a trailing batch smaller than 2 is dropped."""
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2: contrastive losses need an in-batch negative")
    n = table if isinstance(table, int) else len(table)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [Batch(perm[i:i + batch_size]) for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches
