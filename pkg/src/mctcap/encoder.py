"""Image-region encoder: feature projection plus stacked multi-head attention blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .tensor import (
    ShapeError, Tensor, add, as_tensor, concat_cols, layer_norm, masked_fill, matmul, relu,
    scale, softmax_rows, transpose,
)

LN_EPS = 1e-5


@dataclass
class EncoderConfig:
    d_feat: int = 2048
    d_model: int = 1024
    n_heads: int = 8
    d_head: int = 128
    d_ffn: Optional[int] = None
    depth: int = 2

    def __post_init__(self):
        if self.d_ffn is None:
            self.d_ffn = 4 * self.d_model
        self.validate()

    def validate(self):
        if self.n_heads * self.d_head != self.d_model:
            raise ValueError(
                f"n_heads * d_head must equal d_model ({self.n_heads} * {self.d_head} != {self.d_model})")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        for name in ("d_feat", "d_model", "n_heads", "d_head", "d_ffn"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def desk(cls, **overrides) -> "EncoderConfig":
        """Small dimensions used by tests and the toy dataset."""
        base = dict(d_feat=16, d_model=32, n_heads=4, d_head=8, d_ffn=64, depth=2)
        base.update(overrides)
        return cls(**base)


@dataclass
class RegionFeatures:
    image_id: str
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
            raise ValueError(f"{self.image_id}: region matrix must be N x d_feat with N >= 1, "
                             f"got shape {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError(f"{self.image_id}: region features contain NaN or Inf")


@dataclass
class AttentionHeadParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor


@dataclass
class MultiHeadParams:
    heads: List[AttentionHeadParams]
    g_out: Tensor


@dataclass
class FeedForwardParams:
    g1: Tensor
    s1: Tensor
    g2: Tensor
    s2: Tensor


@dataclass
class EncoderBlockParams:
    attn: MultiHeadParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    ffn: FeedForwardParams
    ln2_gain: Tensor
    ln2_bias: Tensor

    @property
    def heads(self) -> List[AttentionHeadParams]:
        return self.attn.heads


# ---------------------------------------------------------------------------
# initialisation (flat name -> array dictionaries)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    r = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=(fan_in, fan_out))


def init_multi_head(rng, prefix: str, d_model: int, n_heads: int, d_head: int) -> Dict[str, np.ndarray]:
    out = {}
    for i in range(n_heads):
        for w in ("wq", "wk", "wv"):
            out[f"{prefix}.head{i}.{w}"] = glorot(rng, d_model, d_head)
    out[f"{prefix}.g_out"] = glorot(rng, n_heads * d_head, d_model)
    return out


def init_ffn(rng, prefix: str, d_model: int, d_ffn: int) -> Dict[str, np.ndarray]:
    return {
        f"{prefix}.g1": glorot(rng, d_model, d_ffn),
        f"{prefix}.s1": np.zeros(d_ffn),
        f"{prefix}.g2": glorot(rng, d_ffn, d_model),
        f"{prefix}.s2": np.zeros(d_model),
    }


def init_norm(prefix: str, d_model: int) -> Dict[str, np.ndarray]:
    return {f"{prefix}.gain": np.ones(d_model), f"{prefix}.bias": np.zeros(d_model)}


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    params = {
        "enc.proj.w": glorot(rng, cfg.d_feat, cfg.d_model),
        "enc.proj.b": np.zeros(cfg.d_model),
    }
    for m in range(cfg.depth):
        p = f"enc.{m}"
        params.update(init_multi_head(rng, f"{p}.attn", cfg.d_model, cfg.n_heads, cfg.d_head))
        params.update(init_norm(f"{p}.ln1", cfg.d_model))
        params.update(init_ffn(rng, f"{p}.ffn", cfg.d_model, cfg.d_ffn))
        params.update(init_norm(f"{p}.ln2", cfg.d_model))
    return params


def bind_multi_head(p: Mapping[str, Tensor], prefix: str) -> MultiHeadParams:
    heads = []
    i = 0
    while f"{prefix}.head{i}.wq" in p:
        heads.append(AttentionHeadParams(p[f"{prefix}.head{i}.wq"], p[f"{prefix}.head{i}.wk"],
                                         p[f"{prefix}.head{i}.wv"]))
        i += 1
    return MultiHeadParams(heads, p[f"{prefix}.g_out"])


def bind_ffn(p: Mapping[str, Tensor], prefix: str) -> FeedForwardParams:
    return FeedForwardParams(p[f"{prefix}.g1"], p[f"{prefix}.s1"], p[f"{prefix}.g2"], p[f"{prefix}.s2"])


def bind_encoder_blocks(p: Mapping[str, Tensor]) -> List[EncoderBlockParams]:
    blocks = []
    m = 0
    while f"enc.{m}.attn.g_out" in p:
        pre = f"enc.{m}"
        blocks.append(EncoderBlockParams(
            attn=bind_multi_head(p, f"{pre}.attn"),
            ln1_gain=p[f"{pre}.ln1.gain"], ln1_bias=p[f"{pre}.ln1.bias"],
            ffn=bind_ffn(p, f"{pre}.ffn"),
            ln2_gain=p[f"{pre}.ln2.gain"], ln2_bias=p[f"{pre}.ln2.bias"],
        ))
        m += 1
    return blocks


# ---------------------------------------------------------------------------
# forward operations


def project_features(U, w_proj, b_proj) -> Tensor:
    """Map raw region descriptors to model width: ``relu(U @ W + b)``."""
    U = as_tensor(U.matrix if isinstance(U, RegionFeatures) else U)
    w_proj = as_tensor(w_proj)
    if U.shape[-1] != w_proj.shape[0]:
        raise ShapeError(f"region feature width {U.shape[-1]} does not match projection input "
                         f"width {w_proj.shape[0]}")
    return relu(add(matmul(U, w_proj), b_proj))


def attend(q_src, k_src, v_src, head: AttentionHeadParams, mask: Optional[np.ndarray] = None,
           return_weights: bool = False):
    """Scaled dot-product attention for one head.

    ``mask`` is a boolean array broadcastable to the score matrix; True marks an
    allowed query/key pair. Disallowed scores are set to ``MASK_VALUE`` before
    the softmax.
    """
    q_src, k_src, v_src = as_tensor(q_src), as_tensor(k_src), as_tensor(v_src)
    if k_src.shape[:-1] != v_src.shape[:-1]:
        raise ShapeError(f"key rows {k_src.shape} and value rows {v_src.shape} differ")
    q = matmul(q_src, head.w_q)
    k = matmul(k_src, head.w_k)
    v = matmul(v_src, head.w_v)
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(head.w_q.shape[-1]))
    if mask is not None:
        scores = masked_fill(scores, ~np.asarray(mask, dtype=bool))
    weights = softmax_rows(scores)
    out = matmul(weights, v)
    if return_weights:
        return out, weights.data
    return out


def multi_head_attention(q_src, kv_src, params: MultiHeadParams, mask=None) -> Tensor:
    """Run every head, concatenate along columns, apply the output projection."""
    parts = [attend(q_src, kv_src, kv_src, h, mask) for h in params.heads]
    return matmul(concat_cols(parts), params.g_out)


def multi_head(x, block: EncoderBlockParams, mask=None) -> Tensor:
    x = as_tensor(x)
    d_model = block.attn.g_out.shape[-1]
    if x.shape[-1] != d_model:
        raise ShapeError(f"input width {x.shape[-1]} does not match d_model {d_model}")
    return multi_head_attention(x, x, block.attn, mask)


def feed_forward(x, ffn: FeedForwardParams) -> Tensor:
    hidden = relu(add(matmul(x, ffn.g1), ffn.s1))
    return add(matmul(hidden, ffn.g2), ffn.s2)


def encoder_block(U_prev, block: EncoderBlockParams, mask=None) -> Tensor:
    U_prev = as_tensor(U_prev)
    C = layer_norm(add(U_prev, multi_head(U_prev, block, mask)), block.ln1_gain, block.ln1_bias, LN_EPS)
    return layer_norm(add(C, feed_forward(C, block.ffn)), block.ln2_gain, block.ln2_bias, LN_EPS)


def encode(U0, blocks: Sequence[EncoderBlockParams], region_mask: Optional[np.ndarray] = None) -> Tensor:
    """Fold ``encoder_block`` over ``blocks``.

    ``region_mask`` (shape ``(..., N)``, True for real regions) keeps padded
    regions out of every key set when a batch is encoded at once.
    """
    if not blocks:
        raise ValueError("encode needs at least one block")
    mask = None if region_mask is None else np.asarray(region_mask, dtype=bool)[..., None, :]
    U = as_tensor(U0)
    for block in blocks:
        U = encoder_block(U, block, mask)
    return U
