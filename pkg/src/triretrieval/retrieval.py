"""Composite-query fusion, cosine scoring, top-k ranking and Recall@K."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from ._norm import unit_rows
from .datamodel import atomic_write
from .encoders import FeatureBatch, ShapeError


class DataError(ValueError):
    pass


def fuse(f_sketch: FeatureBatch, f_text: FeatureBatch) -> FeatureBatch:
    if f_sketch.values.shape != f_text.values.shape:
        raise ShapeError(f"cannot fuse {f_sketch.values.shape} with {f_text.values.shape}")
    return FeatureBatch(f_sketch.values + f_text.values, "fused")


@dataclass(frozen=True)
class GalleryIndex:
    embeddings: np.ndarray
    ids: np.ndarray

    @classmethod
    def build(cls, features: FeatureBatch | np.ndarray, ids) -> "GalleryIndex":
        values = features.values if isinstance(features, FeatureBatch) else np.asarray(features, np.float64)
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape != (values.shape[0],):
            raise ShapeError("one id per gallery row required")
        if np.unique(ids).size != ids.size:
            raise DataError("gallery ids must be unique")
        unit, _ = unit_rows(values, "gallery row")
        return cls(unit, ids)

    def __len__(self) -> int:
        return self.ids.size


@dataclass(frozen=True)
class RetrievalResult:
    ids: np.ndarray      # (N, k) gallery ids, best first
    scores: np.ndarray   # (N, k)
    gallery_ids: np.ndarray


def score(queries: FeatureBatch, index: GalleryIndex) -> np.ndarray:
    if queries.dim != index.embeddings.shape[1]:
        raise ShapeError(f"query dim {queries.dim} != gallery dim {index.embeddings.shape[1]}")
    q, _ = unit_rows(queries.values, "query")
    return np.clip(q @ index.embeddings.T, -1.0, 1.0)


def top_k(scores: np.ndarray, k: int, gallery_ids=None) -> RetrievalResult:
    """Highest ``k`` scores per row; ties go to the lower gallery position."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    g = scores.shape[1]
    if not 1 <= k <= g:
        raise ValueError(f"k must lie in [1, {g}], got {k}")
    gallery_ids = np.arange(g) if gallery_ids is None else np.asarray(gallery_ids, dtype=np.int64)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return RetrievalResult(gallery_ids[order], np.take_along_axis(scores, order, axis=1), gallery_ids)


def recall_at_k(results: RetrievalResult, ground_truth, k: int) -> float:
    truth = np.asarray(ground_truth, dtype=np.int64)
    if truth.shape != (results.ids.shape[0],):
        raise ValueError("exactly one ground-truth id per query required")
    missing = ~np.isin(truth, results.gallery_ids)
    if np.any(missing):
        raise DataError(f"ground-truth id {int(truth[missing][0])} is not in the gallery")
    if not 1 <= k <= results.ids.shape[1]:
        raise ValueError(f"k={k} exceeds the {results.ids.shape[1]} ranked results")
    hits = np.any(results.ids[:, :k] == truth[:, None], axis=1)
    return float(hits.mean())


def recall_table(queries: FeatureBatch, index: GalleryIndex, ground_truth, ks=(1, 5, 10)) -> dict[int, float]:
    ks = [min(k, len(index)) for k in ks]
    res = top_k(score(queries, index), max(ks), index.ids)
    return {k: recall_at_k(res, ground_truth, k) for k in ks}


# --- embedding export ----------------------------------------------------
#
# One JSON header line {"dim", "count", "dtype": "<f4", "ids": [...]} then
# count*dim little-endian float32 values, row-major.

def dump_embeddings(values: np.ndarray, ids, extra: dict | None = None) -> bytes:
    values = np.asarray(values)
    header = {"dim": int(values.shape[1]), "count": int(values.shape[0]), "dtype": "<f4",
              "ids": [int(i) for i in ids]}
    if extra:
        header.update(extra)
    return json.dumps(header).encode() + b"\n" + np.ascontiguousarray(values, dtype="<f4").tobytes()


def export_embeddings(path: str | os.PathLike, values: np.ndarray, ids, extra: dict | None = None) -> None:
    atomic_write(path, dump_embeddings(values, ids, extra))


def import_embeddings(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray, dict]:
    with open(path, "rb") as fh:
        head, _, body = fh.read().partition(b"\n")
    header = json.loads(head)
    if header.get("dtype") != "<f4":
        raise DataError(f"unsupported dtype {header.get('dtype')!r}")
    n, d = header["count"], header["dim"]
    if len(body) != 4 * n * d or len(header["ids"]) != n:
        raise DataError(f"{path}: payload does not match header")
    values = np.frombuffer(body, dtype="<f4").reshape(n, d).astype(np.float32)
    return values, np.asarray(header["ids"], dtype=np.int64), header
