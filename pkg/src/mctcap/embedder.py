"""Word embeddings for the caption decoder.

Two paths feed the decoder: a plain lookup table, and an ELMo-style
contextual embedding built from a character encoder, a stack of
bidirectional LSTMs and a learned softmax mix over the layers.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np

from .encoder import glorot
from .tensor import (
    Tensor, add, as_tensor, concat_cols, embedding_rows, matmul, mul, reduce_sum, relu,
    select, sigmoid, slice_cols, softmax_rows, stack, tanh,
)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

_STRIP = re.compile(r"[^a-z0-9']+")


def tokenize(caption: str) -> List[str]:
    """Lowercase, turn anything outside ``[a-z0-9']`` into a space, split."""
    return _STRIP.sub(" ", caption.lower()).split()


@dataclass
class Vocabulary:
    words: List[str]
    min_count: int = 1
    word_to_id: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.words[:4]) != RESERVED:
            self.words = list(RESERVED) + [w for w in self.words if w not in RESERVED]
        self.word_to_id = {w: i for i, w in enumerate(self.words)}
        if len(self.word_to_id) != len(self.words):
            raise ValueError("vocabulary contains duplicate words")

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.word_to_id

    def id_of(self, word: str) -> int:
        return self.word_to_id.get(word, UNK)

    def word_of(self, idx: int) -> str:
        return self.words[idx]

    def encode(self, tokens: Sequence[str], bos: bool = True, eos: bool = True) -> List[int]:
        ids = [self.id_of(t) for t in tokens]
        return ([BOS] if bos else []) + ids + ([EOS] if eos else [])

    def decode(self, ids: Iterable[int]) -> List[str]:
        """Map ids back to words, dropping bos/pad and stopping at eos."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.words[i])
        return out

    def save(self, path: Union[str, Path]) -> None:
        body = "".join(w + "\n" for w in self.words[4:])
        Path(path).write_text(body, encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(list(RESERVED) + lines)


def build_vocab(captions: Iterable[Union[str, Sequence[str]]], min_count: int = 5) -> Vocabulary:
    """Words seen at least ``min_count`` times, most frequent first, ties alphabetical."""
    counts: Counter = Counter()
    n = 0
    for cap in captions:
        toks = tokenize(cap) if isinstance(cap, str) else list(cap)
        counts.update(toks)
        n += 1
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((w for w, c in counts.items() if c >= min_count and w not in RESERVED),
                  key=lambda w: (-counts[w], w))
    return Vocabulary(list(RESERVED) + kept, min_count=min_count)


@dataclass
class CharVocab:
    chars: List[str]
    char_to_id: Dict[str, int] = field(init=False, repr=False)

    PAD_CHAR = 0
    UNK_CHAR = 1

    def __post_init__(self):
        self.char_to_id = {c: i + 2 for i, c in enumerate(self.chars)}

    def __len__(self) -> int:
        return len(self.chars) + 2

    def ids(self, word: str) -> List[int]:
        return [self.char_to_id.get(c, self.UNK_CHAR) for c in word]

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text("".join(c + "\n" for c in self.chars), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CharVocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "CharVocab":
        return cls(sorted({c for w in words for c in w}))


@dataclass
class ElmoConfig:
    layers: int = 2
    emb: int = 1024
    d_char: int = 64
    max_word_len: int = 16

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError(f"ELMo needs at least one LSTM layer, got {self.layers}")
        if self.emb % 2:
            raise ValueError(f"ELMo width must be even (split over two directions), got {self.emb}")
        if self.max_word_len < 1 or self.d_char < 1:
            raise ValueError("d_char and max_word_len must be positive")

    @classmethod
    def desk(cls, **overrides) -> "ElmoConfig":
        base = dict(layers=1, emb=32, d_char=16, max_word_len=12)
        base.update(overrides)
        return cls(**base)


@dataclass
class LSTMCellParams:
    w_x: Tensor
    w_h: Tensor
    b: Tensor

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]


@dataclass
class ElmoParams:
    char_table: Tensor
    char_proj_w: Tensor
    char_proj_b: Tensor
    forward: List[LSTMCellParams]
    backward: List[LSTMCellParams]
    mix_logits: Tensor
    gamma: Tensor

    def mixing_weights(self) -> np.ndarray:
        return softmax_rows(self.mix_logits).data


# ---------------------------------------------------------------------------
# parameters


def init_lstm(rng: np.random.Generator, prefix: str, d_in: int, d_h: int) -> Dict[str, np.ndarray]:
    b = np.zeros(4 * d_h)
    b[d_h:2 * d_h] = 1.0  # forget gate
    return {
        f"{prefix}.w_x": glorot(rng, d_in, 4 * d_h),
        f"{prefix}.w_h": glorot(rng, d_h, 4 * d_h),
        f"{prefix}.b": b,
    }


def init_elmo(cfg: ElmoConfig, n_chars: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    params = {
        "elmo.char_table": glorot(rng, n_chars, cfg.d_char),
        "elmo.char_proj.w": glorot(rng, cfg.d_char, cfg.emb),
        "elmo.char_proj.b": np.zeros(cfg.emb),
    }
    half = cfg.emb // 2
    for j in range(cfg.layers):
        params.update(init_lstm(rng, f"elmo.lstm{j}.fwd", cfg.emb, half))
        params.update(init_lstm(rng, f"elmo.lstm{j}.bwd", cfg.emb, half))
    params["elmo.mix_logits"] = np.zeros(cfg.layers + 1)
    params["elmo.gamma"] = np.ones(1)
    return params


def _bind_lstm(p: Mapping[str, Tensor], prefix: str) -> LSTMCellParams:
    return LSTMCellParams(p[f"{prefix}.w_x"], p[f"{prefix}.w_h"], p[f"{prefix}.b"])


def bind_elmo(p: Mapping[str, Tensor]) -> ElmoParams:
    fwd, bwd = [], []
    j = 0
    while f"elmo.lstm{j}.fwd.w_x" in p:
        fwd.append(_bind_lstm(p, f"elmo.lstm{j}.fwd"))
        bwd.append(_bind_lstm(p, f"elmo.lstm{j}.bwd"))
        j += 1
    return ElmoParams(p["elmo.char_table"], p["elmo.char_proj.w"], p["elmo.char_proj.b"],
                      fwd, bwd, p["elmo.mix_logits"], p["elmo.gamma"])


# ---------------------------------------------------------------------------
# forward operations


def standard_embed(ids, table) -> Tensor:
    return embedding_rows(table, ids)


def char_id_matrix(words: Sequence[str], chars: CharVocab, max_word_len: int) -> Tuple[np.ndarray, np.ndarray]:
    """Padded character ids ``(len(words), max_word_len)`` and the per-word pooling weights."""
    ids = np.zeros((len(words), max_word_len), dtype=np.int64)
    weights = np.zeros((len(words), max_word_len))
    for r, w in enumerate(words):
        cid = chars.ids(w)[:max_word_len] or [CharVocab.UNK_CHAR]
        ids[r, :len(cid)] = cid
        weights[r, :len(cid)] = 1.0 / len(cid)
    return ids, weights


def char_encode_ids(char_ids: np.ndarray, pool_weights: np.ndarray, params: ElmoParams) -> Tensor:
    """Character layer for pre-computed id/weight arrays of shape ``(..., L)``."""
    emb = embedding_rows(params.char_table, char_ids)                   # (..., L, d_char)
    pooled = reduce_sum(mul(emb, pool_weights[..., None]), axis=-2)     # (..., d_char)
    flat = pooled if pooled.data.ndim >= 2 else _as_row(pooled)
    out = relu(add(matmul(flat, params.char_proj_w), params.char_proj_b))
    return out if pooled.data.ndim >= 2 else _first_row(out)


def char_encode(word: str, params: ElmoParams, chars: CharVocab, max_word_len: int) -> Tensor:
    """Mean-pooled character embedding of ``word``, projected to the ELMo width."""
    ids, w = char_id_matrix([word], chars, max_word_len)
    return _first_row(char_encode_ids(ids, w, params))


def lstm_cell(x, h_prev, c_prev, params: LSTMCellParams) -> Tuple[Tensor, Tensor]:
    """One LSTM step; gate column order is input, forget, candidate, output."""
    x, h_prev, c_prev = as_tensor(x), as_tensor(h_prev), as_tensor(c_prev)
    squeeze = x.data.ndim == 1
    if squeeze:
        x, h_prev, c_prev = _as_row(x), _as_row(h_prev), _as_row(c_prev)
    d = params.hidden
    z = add(add(matmul(x, params.w_x), matmul(h_prev, params.w_h)), params.b)
    i = sigmoid(slice_cols(z, 0, d))
    f = sigmoid(slice_cols(z, d, 2 * d))
    g = tanh(slice_cols(z, 2 * d, 3 * d))
    o = sigmoid(slice_cols(z, 3 * d, 4 * d))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    if squeeze:
        return _first_row(h), _first_row(c)
    return h, c


def _run_lstm(xs: List[Tensor], cell: LSTMCellParams) -> List[Tensor]:
    h = c = Tensor(np.zeros(xs[0].shape[:-1] + (cell.hidden,)))
    out = []
    for x in xs:
        h, c = lstm_cell(x, h, c, cell)
        out.append(h)
    return out


def elmo_layers(layer0: Tensor, params: ElmoParams) -> List[Tensor]:
    """All ``a + 1`` layer outputs for one sentence; ``layer0`` is ``G x emb``."""
    G = layer0.shape[0]
    layers = [layer0]
    cur = layer0
    for fwd, bwd in zip(params.forward, params.backward):
        xs = [_row(cur, g) for g in range(G)]
        hf = _run_lstm(xs, fwd)
        hb = _run_lstm(xs[::-1], bwd)[::-1]
        cur = concat_cols([stack(hf, axis=0), stack(hb, axis=0)])
        layers.append(cur)
    return layers


def mix_layers(layers: Sequence[Tensor], params: ElmoParams) -> Tensor:
    """``gamma * sum_j softmax(mix_logits)_j * layer_j``."""
    w = softmax_rows(params.mix_logits)
    total = None
    for j, layer in enumerate(layers):
        term = mul(layer, _pick(w, j))
        total = term if total is None else add(total, term)
    return mul(total, params.gamma)


def elmo_embed(words: Sequence[str], params: ElmoParams, chars: CharVocab, max_word_len: int,
               return_layers: bool = False):
    """Bidirectional contextual embedding of a whole sentence (``G x emb``)."""
    if not words:
        raise ValueError("elmo_embed needs at least one word")
    ids, w = char_id_matrix(list(words), chars, max_word_len)
    layers = elmo_layers(char_encode_ids(ids, w, params), params)
    out = mix_layers(layers, params)
    return (out, layers) if return_layers else out


def elmo_embed_prefix(layer0: Tensor, params: ElmoParams) -> Tensor:
    """Left-context ELMo for a batch ``(..., G, emb)`` of decoder inputs.

    The forward LSTMs are causal already. Each backward LSTM is cut to a single
    cell update from the zero state at every position, which is what it holds
    at the last word of a prefix. With one LSTM layer, row ``g`` therefore
    equals row ``g`` of :func:`elmo_embed` on the first ``g + 1`` words. Deeper
    stacks stay causal, but an upper layer then sees lower backward states cut
    the same way rather than recomputed for every prefix.
    """
    G = layer0.shape[-2]
    layers = [layer0]
    cur = layer0
    for fwd, bwd in zip(params.forward, params.backward):
        xs = [_select_time(cur, g) for g in range(G)]
        hf = stack(_run_lstm(xs, fwd), axis=-2)
        zeros = Tensor(np.zeros(cur.shape[:-1] + (bwd.hidden,)))
        hb, _ = lstm_cell(cur, zeros, zeros, bwd)
        cur = concat_cols([hf, hb])
        layers.append(cur)
    return mix_layers(layers, params)


# small structural helpers built from tensor ops

def _as_row(x: Tensor) -> Tensor:
    return stack([x], axis=0)


def _first_row(x: Tensor) -> Tensor:
    return select(x, 0, axis=0)


def _row(x: Tensor, g: int) -> Tensor:
    return select(x, g, axis=0)


def _select_time(x: Tensor, g: int) -> Tensor:
    return select(x, g, axis=x.data.ndim - 2)


def _pick(w: Tensor, j: int) -> Tensor:
    return slice_cols(w, j, j + 1)
