"""Caption decoder: masked self-attention, cross-modal attention, generation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .embedder import (
    BOS, EOS, ElmoParams, bind_elmo, char_encode_ids, elmo_embed_prefix, embedding_rows,
)
from .encoder import (
    LN_EPS, FeedForwardParams, MultiHeadParams, bind_ffn, bind_multi_head, feed_forward, glorot,
    init_ffn, init_multi_head, init_norm, multi_head_attention,
)
from .tensor import Tensor, add, as_tensor, layer_norm, matmul

MODES = ("MCT", "ELMo-MCT")


@dataclass
class DecoderConfig:
    d_model: int = 1024
    n_heads: int = 8
    d_head: int = 128
    d_ffn: Optional[int] = None
    depth: int = 2
    max_len: int = 20

    def __post_init__(self):
        if self.d_ffn is None:
            self.d_ffn = 4 * self.d_model
        if self.n_heads * self.d_head != self.d_model:
            raise ValueError(
                f"n_heads * d_head must equal d_model ({self.n_heads} * {self.d_head} != {self.d_model})")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.max_len < 2:
            raise ValueError(f"max_len must be >= 2, got {self.max_len}")

    @classmethod
    def desk(cls, **overrides) -> "DecoderConfig":
        base = dict(d_model=32, n_heads=4, d_head=8, d_ffn=64, depth=2, max_len=20)
        base.update(overrides)
        return cls(**base)


@dataclass
class DecoderBlockParams:
    self_attn: MultiHeadParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    cross_attn: MultiHeadParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    ffn: FeedForwardParams
    ln3_gain: Tensor
    ln3_bias: Tensor


@dataclass
class GeneratorParams:
    out_proj: Tensor
    out_bias: Tensor


@dataclass
class DecoderParams:
    """Everything the decoder reads: embeddings, blocks and the vocabulary projection.

    ``word_chars``/``word_char_weights`` hold the padded character ids of each
    vocabulary entry; they are constants used by the ELMo path.
    """

    word_table: Tensor
    blocks: List[DecoderBlockParams]
    generator: GeneratorParams
    elmo: Optional[ElmoParams] = None
    word_chars: Optional[np.ndarray] = None
    word_char_weights: Optional[np.ndarray] = None


def init_decoder(cfg: DecoderConfig, vocab_size: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    params = {"dec.embed": rng.normal(0.0, cfg.d_model ** -0.5, size=(vocab_size, cfg.d_model))}
    for m in range(cfg.depth):
        p = f"dec.{m}"
        params.update(init_multi_head(rng, f"{p}.self", cfg.d_model, cfg.n_heads, cfg.d_head))
        params.update(init_norm(f"{p}.ln1", cfg.d_model))
        params.update(init_multi_head(rng, f"{p}.cross", cfg.d_model, cfg.n_heads, cfg.d_head))
        params.update(init_norm(f"{p}.ln2", cfg.d_model))
        params.update(init_ffn(rng, f"{p}.ffn", cfg.d_model, cfg.d_ffn))
        params.update(init_norm(f"{p}.ln3", cfg.d_model))
    params["gen.w"] = glorot(rng, cfg.d_model, vocab_size)
    params["gen.b"] = np.zeros(vocab_size)
    return params


def bind_decoder_blocks(p: Mapping[str, Tensor]) -> List[DecoderBlockParams]:
    blocks = []
    m = 0
    while f"dec.{m}.self.g_out" in p:
        pre = f"dec.{m}"
        blocks.append(DecoderBlockParams(
            self_attn=bind_multi_head(p, f"{pre}.self"),
            ln1_gain=p[f"{pre}.ln1.gain"], ln1_bias=p[f"{pre}.ln1.bias"],
            cross_attn=bind_multi_head(p, f"{pre}.cross"),
            ln2_gain=p[f"{pre}.ln2.gain"], ln2_bias=p[f"{pre}.ln2.bias"],
            ffn=bind_ffn(p, f"{pre}.ffn"),
            ln3_gain=p[f"{pre}.ln3.gain"], ln3_bias=p[f"{pre}.ln3.bias"],
        ))
        m += 1
    return blocks


def bind_decoder(p: Mapping[str, Tensor], word_chars=None, word_char_weights=None) -> DecoderParams:
    elmo = bind_elmo(p) if "elmo.char_table" in p else None
    return DecoderParams(p["dec.embed"], bind_decoder_blocks(p), GeneratorParams(p["gen.w"], p["gen.b"]),
                         elmo, word_chars, word_char_weights)


# ---------------------------------------------------------------------------
# masks and positions


def causal_mask(G: int) -> np.ndarray:
    """Boolean ``G x G`` matrix, True where key ``j`` is visible from query ``i`` (``j <= i``)."""
    if G < 1:
        raise ValueError(f"causal_mask needs G >= 1, got {G}")
    return np.tril(np.ones((G, G), dtype=bool))


def positional_encoding(G: int, d_model: int) -> np.ndarray:
    pos = np.arange(G)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((G, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


# ---------------------------------------------------------------------------
# sublayers


def masked_self_attention(U, block: DecoderBlockParams, causal: bool = True) -> Tensor:
    U = as_tensor(U)
    mask = causal_mask(U.shape[-2]) if causal else None
    att = multi_head_attention(U, U, block.self_attn, mask)
    return layer_norm(add(U, att), block.ln1_gain, block.ln1_bias, LN_EPS)


def cross_attention(D_m, U_M, block: DecoderBlockParams, memory_mask: Optional[np.ndarray] = None) -> Tensor:
    """Text queries attend over image memory rows; ``memory_mask`` is ``(..., N)``, True = real region."""
    D_m = as_tensor(D_m)
    mask = None if memory_mask is None else np.asarray(memory_mask, dtype=bool)[..., None, :]
    att = multi_head_attention(D_m, U_M, block.cross_attn, mask)
    return layer_norm(add(D_m, att), block.ln2_gain, block.ln2_bias, LN_EPS)


def decoder_block(x, U_M, block: DecoderBlockParams, memory_mask=None) -> Tensor:
    D_m = masked_self_attention(x, block)
    D_f = cross_attention(D_m, U_M, block, memory_mask)
    return layer_norm(add(D_f, feed_forward(D_f, block.ffn)), block.ln3_gain, block.ln3_bias, LN_EPS)


def embed_tokens(token_ids: np.ndarray, params: DecoderParams, mode: str) -> Tensor:
    """Decoder input rows: word table (+ left-context ELMo) + sinusoidal positions."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    ids = np.asarray(token_ids, dtype=np.int64)
    x = embedding_rows(params.word_table, ids)
    if mode == "ELMo-MCT":
        if params.elmo is None or params.word_chars is None:
            raise ValueError("ELMo-MCT mode needs ELMo parameters and the word character table")
        char_layer = char_encode_ids(params.word_chars, params.word_char_weights, params.elmo)
        layer0 = embedding_rows(char_layer, ids)
        x = add(x, elmo_embed_prefix(layer0, params.elmo))
    G = ids.shape[-1]
    return add(x, positional_encoding(G, params.word_table.shape[1]))


def decode_logits(token_ids, U_M, params: DecoderParams, mode: str = "MCT",
                  memory_mask: Optional[np.ndarray] = None) -> Tensor:
    """Logits ``(..., G, |V|)``; row ``i`` scores the token that follows ``token_ids[i]``."""
    x = embed_tokens(token_ids, params, mode)
    for block in params.blocks:
        x = decoder_block(x, U_M, block, memory_mask)
    return add(matmul(x, params.generator.out_proj), params.generator.out_bias)


# ---------------------------------------------------------------------------
# generation


def _log_softmax(row: np.ndarray) -> np.ndarray:
    z = row - row.max()
    return z - np.log(np.exp(z).sum())


def _next_logits(prefix: Sequence[int], U_M, params, mode) -> np.ndarray:
    logits = decode_logits(np.asarray(prefix), U_M, params, mode)
    return logits.data[-1]


def generate_greedy(U_M, params: DecoderParams, mode: str = "MCT", max_len: int = 20) -> List[int]:
    """Argmax decoding from ``bos``; returns the generated ids (eos included if produced).

    ``np.argmax`` returns the first maximum, so ties go to the lowest id.
    """
    U_M = Tensor(as_tensor(U_M).data)
    prefix = [BOS]
    out: List[int] = []
    while len(out) < max_len:
        tok = int(np.argmax(_next_logits(prefix, U_M, params, mode)))
        out.append(tok)
        if tok == EOS:
            break
        prefix.append(tok)
    return out


def sequence_score(U_M, params: DecoderParams, tokens: Sequence[int], mode: str = "MCT") -> float:
    """Length-normalised log-probability of ``tokens`` following ``bos``."""
    if not tokens:
        return 0.0
    ids = np.asarray([BOS] + list(tokens[:-1]))
    logits = decode_logits(ids, Tensor(as_tensor(U_M).data), params, mode).data
    lp = np.array([_log_softmax(r) for r in logits])
    return float(lp[np.arange(len(tokens)), list(tokens)].sum() / len(tokens))


def generate_beam(U_M, params: DecoderParams, mode: str = "MCT", beam: int = 3, max_len: int = 20) -> List[int]:
    """Length-normalised beam search.

    Live hypotheses are ranked by total log-probability (all share one length);
    finished ones by log-probability per token. The greedy sequence is always
    part of the final pool, and the pool is rescored with :func:`sequence_score`,
    so the result never scores below greedy decoding.
    """
    if beam < 1:
        raise ValueError(f"beam width must be >= 1, got {beam}")
    if beam == 1:
        return generate_greedy(U_M, params, mode, max_len)
    U_M = Tensor(as_tensor(U_M).data)
    live: List[Tuple[float, List[int]]] = [(0.0, [])]
    finished: List[Tuple[float, List[int]]] = []
    while live:
        cands = []
        for total, toks in live:
            lp = _log_softmax(_next_logits([BOS] + toks, U_M, params, mode))
            # best `beam` extensions of this hypothesis, ties to the lowest id
            order = np.lexsort((np.arange(lp.size), -lp))[:beam]
            for tok in order:
                cands.append((total + float(lp[tok]), toks + [int(tok)]))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for total, toks in cands:
            if toks[-1] == EOS or len(toks) >= max_len:
                finished.append((total / len(toks), toks))
            else:
                live.append((total, toks))
            if len(live) == beam:
                break
        # stop once no live hypothesis can still enter the finished top slot
        if len(finished) >= beam:
            break

    pool = {tuple(toks) for _, toks in finished}
    pool.add(tuple(generate_greedy(U_M, params, mode, max_len)))
    scored = [(sequence_score(U_M, params, toks, mode), list(toks)) for toks in pool]
    return min(scored, key=lambda f: (-f[0], f[1]))[1]
