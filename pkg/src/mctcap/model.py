"""The full captioner: configs, vocabularies and one flat parameter dictionary."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .decoder import (
    MODES, DecoderConfig, DecoderParams, bind_decoder, decode_logits, generate_beam, generate_greedy,
    init_decoder,
)
from .embedder import CharVocab, ElmoConfig, Vocabulary, char_id_matrix, init_elmo
from .encoder import EncoderConfig, bind_encoder_blocks, encode, init_encoder, project_features
from .tensor import Tape, Tensor


@dataclass
class CaptionModel:
    encoder_cfg: EncoderConfig
    decoder_cfg: DecoderConfig
    elmo_cfg: ElmoConfig
    mode: str
    vocab: Vocabulary
    chars: CharVocab
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.encoder_cfg.d_model != self.decoder_cfg.d_model:
            raise ValueError("encoder and decoder d_model differ")
        if self.mode == "ELMo-MCT" and self.elmo_cfg.emb != self.decoder_cfg.d_model:
            raise ValueError(f"ELMo width {self.elmo_cfg.emb} must equal d_model {self.decoder_cfg.d_model}")
        self._word_chars, self._word_char_weights = char_id_matrix(
            self.vocab.words, self.chars, self.elmo_cfg.max_word_len)

    @classmethod
    def initialize(cls, encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig, elmo_cfg: ElmoConfig,
                   vocab: Vocabulary, mode: str = "MCT", seed: int = 0,
                   chars: Optional[CharVocab] = None) -> "CaptionModel":
        rng = np.random.default_rng(seed)
        if chars is None:
            chars = CharVocab.from_words(vocab.words)
        params = init_encoder(encoder_cfg, rng)
        params.update(init_decoder(decoder_cfg, len(vocab), rng))
        if mode == "ELMo-MCT":
            params.update(init_elmo(elmo_cfg, len(chars), rng))
        return cls(encoder_cfg, decoder_cfg, elmo_cfg, mode, vocab, chars, params)

    # -- binding ---------------------------------------------------------

    def bind(self, tape: Optional[Tape] = None) -> Dict[str, Tensor]:
        """Tensors for every parameter, tracked on ``tape`` when given."""
        if tape is None:
            return {k: Tensor(v) for k, v in self.params.items()}
        return {k: tape.watch(v) for k, v in self.params.items()}

    def decoder_params(self, bound: Dict[str, Tensor]) -> DecoderParams:
        return bind_decoder(bound, self._word_chars, self._word_char_weights)

    # -- forward ---------------------------------------------------------

    def encode(self, features, bound: Dict[str, Tensor], region_mask=None) -> Tensor:
        U0 = project_features(features, bound["enc.proj.w"], bound["enc.proj.b"])
        return encode(U0, bind_encoder_blocks(bound), region_mask)

    def logits(self, features, token_ids, bound: Dict[str, Tensor], region_mask=None) -> Tensor:
        U_M = self.encode(features, bound, region_mask)
        return decode_logits(token_ids, U_M, self.decoder_params(bound), self.mode, region_mask)

    def generate(self, features, beam: int = 1) -> List[int]:
        bound = self.bind()
        U_M = self.encode(np.asarray(features, dtype=np.float64), bound)
        dec = self.decoder_params(bound)
        if beam == 1:
            return generate_greedy(U_M, dec, self.mode, self.decoder_cfg.max_len)
        return generate_beam(U_M, dec, self.mode, beam, self.decoder_cfg.max_len)

    def caption(self, features, beam: int = 1) -> List[str]:
        return self.vocab.decode(self.generate(features, beam))

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))
