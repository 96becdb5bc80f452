"""Two-layer tanh encoders with hand-written backprop.

Forward per row: ``out = W2 @ tanh(W1 @ x + b1) + b2``. Features are not
normalized here; the losses and the retrieval scorer normalize on their own.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .datamodel import MODALITIES, atomic_write

PARAM_ORDER = ("W1", "b1", "W2", "b2")


class ShapeError(ValueError):
    pass


@dataclass
class FeatureBatch:
    values: np.ndarray
    modality: str = ""

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {self.values.shape}")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class EncoderState:
    modality: str
    params: dict[str, np.ndarray]
    trainable: bool = True
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self) -> None:
        if not self.moments:
            self.moments = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in self.params.items()}

    @property
    def input_dim(self) -> int:
        return self.params["W1"].shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.params["W1"].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.params["W2"].shape[0]


@dataclass
class ParamGrads:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    views: np.ndarray

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_ORDER}


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def init_encoder(modality: str, input_dim: int, hidden_dim: int = 128, embed_dim: int = 64,
                 seed: int = 0) -> EncoderState:
    if min(input_dim, hidden_dim, embed_dim) < 1:
        raise ShapeError("encoder dims must be >= 1")
    rng = np.random.default_rng(seed)
    params = {
        "W1": _glorot(rng, hidden_dim, input_dim),
        "b1": np.zeros(hidden_dim),
        "W2": _glorot(rng, embed_dim, hidden_dim),
        "b2": np.zeros(embed_dim),
    }
    return EncoderState(modality, params)


def _check_views(enc: EncoderState, views: np.ndarray) -> np.ndarray:
    views = np.asarray(views, dtype=np.float64)
    if views.ndim != 2 or views.shape[1] != enc.input_dim:
        raise ShapeError(f"{enc.modality} encoder expects (N, {enc.input_dim}) views, got {views.shape}")
    return views


def encode(enc: EncoderState, views: np.ndarray) -> FeatureBatch:
    x = _check_views(enc, views)
    p = enc.params
    h = np.tanh(x @ p["W1"].T + p["b1"])
    return FeatureBatch(h @ p["W2"].T + p["b2"], enc.modality)


def backward(enc: EncoderState, views: np.ndarray, upstream: np.ndarray) -> ParamGrads:
    """Gradients of ``sum(upstream * encode(enc, views))`` w.r.t. parameters and views."""
    x = _check_views(enc, views)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (x.shape[0], enc.embed_dim):
        raise ShapeError(f"upstream shape {upstream.shape} != {(x.shape[0], enc.embed_dim)}")
    p = enc.params
    h = np.tanh(x @ p["W1"].T + p["b1"])
    dh = upstream @ p["W2"]
    dpre = dh * (1.0 - h * h)
    return ParamGrads(
        W1=dpre.T @ x,
        b1=dpre.sum(axis=0),
        W2=upstream.T @ h,
        b2=upstream.sum(axis=0),
        views=dpre @ p["W1"],
    )


def set_trainable(enc: EncoderState, flag: bool) -> EncoderState:
    enc.trainable = bool(flag)
    return enc


def checksum(enc: EncoderState) -> str:
    h = hashlib.sha256(enc.modality.encode())
    for name in PARAM_ORDER:
        arr = np.ascontiguousarray(enc.params[name], dtype="<f8")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# --- checkpoints -----------------------------------------------------------
#
# Layout: one JSON header line terminated by "\n", then the raw little-endian
# float64 blocks listed in header["blocks"], row-major, in that order.
# Encoder blocks are "<modality>.W1", ".b1", ".W2", ".b2"; center banks are
# "centers.<name>".

CKPT_FORMAT = "triretrieval-checkpoint"


def dump_checkpoint(encoders: dict[str, EncoderState], centers: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> bytes:
    header: dict = {"format": CKPT_FORMAT, "version": 1, "encoders": {}, "blocks": []}
    payload = []
    for mod in MODALITIES:
        if mod not in encoders:
            continue
        enc = encoders[mod]
        header["encoders"][mod] = {
            "input_dim": enc.input_dim, "hidden_dim": enc.hidden_dim, "embed_dim": enc.embed_dim,
            "step_count": enc.step_count, "trainable": enc.trainable,
        }
        for name in PARAM_ORDER:
            arr = enc.params[name]
            header["blocks"].append({"name": f"{mod}.{name}", "shape": list(arr.shape)})
            payload.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    for name, arr in sorted((centers or {}).items()):
        header["blocks"].append({"name": f"centers.{name}", "shape": list(arr.shape)})
        payload.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    if meta:
        header["meta"] = meta
    return json.dumps(header, sort_keys=True).encode() + b"\n" + b"".join(payload)


def save_checkpoint(path: str | os.PathLike, encoders: dict[str, EncoderState],
                    centers: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    atomic_write(path, dump_checkpoint(encoders, centers, meta))


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, EncoderState], dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    head, sep, body = raw.partition(b"\n")
    if not sep:
        raise ValueError(f"{path}: missing checkpoint header")
    header = json.loads(head)
    if header.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    blocks: dict[str, np.ndarray] = {}
    offset = 0
    for blk in header["blocks"]:
        shape = tuple(blk["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape)
        blocks[blk["name"]] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(body):
        raise ValueError(f"{path}: payload size mismatch ({len(body)} bytes, expected {offset})")
    encoders = {}
    for mod, info in header["encoders"].items():
        params = {name: blocks[f"{mod}.{name}"] for name in PARAM_ORDER}
        encoders[mod] = EncoderState(mod, params, trainable=info["trainable"], step_count=info["step_count"])
    centers = {k.split(".", 1)[1]: v for k, v in blocks.items() if k.startswith("centers.")}
    return encoders, centers, header.get("meta", {})
