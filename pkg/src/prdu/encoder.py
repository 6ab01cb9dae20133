"""Sequence encoder: embedding, optional bidirectional GRU, mean pooling, query attention.

All functions work on time-major padded batches.  Position t of example b
takes part in pooling and attention only where ``mask[t, b] == 1``; padded
steps therefore never change an example's representation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from .data import FlattenedInput
from .numcore import Tensor, constant

GRU_NAMES = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 50
    d_emb: int = 32
    d_hidden: int = 32
    d_attn: int = 16
    use_rnn: bool = True
    input_mode: str = "tokens"  # or "features"
    feature_dim: int = 0

    def __post_init__(self):
        if self.input_mode not in ("tokens", "features"):
            raise ValueError(f"unknown input mode {self.input_mode!r}")
        if self.input_mode == "features" and self.feature_dim < 1:
            raise ValueError("feature mode needs feature_dim >= 1")
        for name in ("d_emb", "d_hidden", "d_attn"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def d_in(self) -> int:
        return self.d_emb if self.input_mode == "tokens" else self.feature_dim

    @property
    def d_model(self) -> int:
        return 2 * self.d_hidden if self.use_rnn else self.d_in


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Declaration order of encoder parameters (also the checkpoint order)."""
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.input_mode == "tokens":
        shapes["emb"] = (cfg.vocab_size, cfg.d_emb)
    if cfg.use_rnn:
        H, d = cfg.d_hidden, cfg.d_in
        for direction in ("gru_fwd", "gru_bwd"):
            for n in GRU_NAMES:
                shape = (d, H) if n[0] == "W" else (H, H) if n[0] == "U" else (H,)
                shapes[f"{direction}.{n}"] = shape
    dm = cfg.d_model
    shapes["attn.W_q"] = (dm, cfg.d_attn)
    shapes["attn.W_k"] = (dm, cfg.d_attn)
    shapes["attn.W_v"] = (dm, dm)
    return shapes


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    bound = 1.0 / math.sqrt(cfg.d_hidden)
    for name, shape in param_shapes(cfg).items():
        if name == "emb":
            out[name] = rng.normal(0.0, 0.02, size=shape)
        elif name.startswith("gru"):
            out[name] = rng.uniform(-bound, bound, size=shape)
        else:
            lim = 1.0 / math.sqrt(shape[0])
            out[name] = rng.uniform(-lim, lim, size=shape)
    return out


@dataclass
class Batch:
    """Padded, time-major batch of flattened inputs."""

    tokens: np.ndarray  # (T, B) int ids, or (T, B, F) features
    mask: np.ndarray  # (T, B) of 0.0 / 1.0
    utt_index: np.ndarray  # (T, B), 0 on padding

    @property
    def size(self) -> int:
        return self.mask.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=0)


def make_batch(inputs: Sequence[FlattenedInput], pad_to: int | None = None) -> Batch:
    T = max(x.length for x in inputs)
    if pad_to is not None:
        if pad_to < T:
            raise ValueError("pad_to shorter than the longest input")
        T = pad_to
    B = len(inputs)
    feats = inputs[0].is_features
    if feats:
        tokens = np.zeros((T, B, inputs[0].tokens.shape[1]))
    else:
        tokens = np.zeros((T, B), dtype=np.int64)
    mask = np.zeros((T, B))
    idx = np.zeros((T, B), dtype=np.int64)
    for b, x in enumerate(inputs):
        n = x.length
        tokens[:n, b] = x.tokens
        mask[:n, b] = 1.0
        idx[:n, b] = x.utt_index
    return Batch(tokens, mask, idx)


def embed(batch: Batch, params: Mapping[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """(T, B, d_in) input vectors: table lookup, or the features themselves."""
    if cfg.input_mode == "features":
        if batch.tokens.ndim != 3 or batch.tokens.shape[2] != cfg.feature_dim:
            raise nc.ShapeError(f"expected features of width {cfg.feature_dim}")
        return constant(batch.tokens)
    if batch.tokens.ndim != 2:
        raise nc.ShapeError("token mode expects integer ids")
    return nc.gather(params["emb"], batch.tokens)


def bigru_forward(x: Tensor, params: Mapping[str, Tensor], mask: np.ndarray | None = None) -> Tensor:
    """Concatenate forward and backward GRU states: (T, B, 2 * d_hidden)."""
    fwd = nc.gru(x, [params[f"gru_fwd.{n}"] for n in GRU_NAMES], mask=mask)
    bwd = nc.gru(x, [params[f"gru_bwd.{n}"] for n in GRU_NAMES], mask=mask, reverse=True)
    return nc.concat([fwd, bwd])


def pool(C: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean over the unmasked time steps: (T, B, d) -> (B, d)."""
    T, B, d = C.shape
    if mask is None:
        mask = np.ones((T, B))
    m = np.broadcast_to(mask[:, :, None], C.shape)
    total = nc.sum(nc.mul(C, constant(m)), axis=0)
    inv = np.broadcast_to((1.0 / mask.sum(axis=0))[:, None], (B, d))
    return nc.mul(total, constant(inv))


def attention_weights(e: Tensor, C: Tensor, params: Mapping[str, Tensor], mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product weights of query ``e`` (B, d) over keys ``C`` (T, B, d): (T, B)."""
    T = C.shape[0]
    q = nc.matmul(e, params["attn.W_q"])
    k = nc.matmul(C, params["attn.W_k"])
    d_attn = q.shape[-1]
    scores = nc.scale(nc.sum(nc.mul(k, nc.expand(q, T, axis=0)), axis=-1), 1.0 / math.sqrt(d_attn))
    if mask is not None:
        scores = nc.add(scores, constant(np.where(mask > 0, 0.0, nc.MASK_NEG)))
    return nc.softmax_t(scores, axis=0)


def attend(e: Tensor, C: Tensor, params: Mapping[str, Tensor], mask: np.ndarray | None = None) -> Tensor:
    """Attention-weighted sum of value projections of ``C``: (B, d_model)."""
    w = attention_weights(e, C, params, mask)
    v = nc.matmul(C, params["attn.W_v"])
    return nc.sum(nc.mul(v, nc.expand(w, v.shape[-1], axis=-1)), axis=0)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity unless ``train`` and ``rate > 0``."""
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout at train time needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return nc.mul(x, constant(keep))


def encode(
    batch: Batch,
    params: Mapping[str, Tensor],
    cfg: EncoderConfig,
    rate: float = 0.0,
    rng: np.random.Generator | None = None,
    train: bool = False,
) -> Tensor:
    """Representation r = attend(pool(C), C) of every example in the batch."""
    x = embed(batch, params, cfg)
    C = bigru_forward(x, params, batch.mask) if cfg.use_rnn else x
    C = dropout(C, rate, rng, train)
    e = pool(C, batch.mask)
    return attend(e, C, params, batch.mask)
