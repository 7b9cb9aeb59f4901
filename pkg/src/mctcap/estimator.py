"""scikit-learn style front end for the captioner."""

from __future__ import annotations

from typing import Callable, List, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .data import Example
from .decoder import MODES, DecoderConfig
from .embedder import ElmoConfig, Vocabulary, build_vocab, tokenize
from .encoder import EncoderConfig
from .evaluation import build_corpus
from .metrics import EvalReport, cider_d, score_corpus
from .model import CaptionModel
from .training import TrainConfig, load_checkpoint, save_checkpoint, train


def check_region_features(X, d_feat: Optional[int] = None) -> List[np.ndarray]:
    """Validate a sequence of per-image ``N x d_feat`` region matrices."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    if len(X) == 0:
        raise ValueError("expected at least one image")
    out = []
    for k, m in enumerate(X):
        m = check_array(m, dtype=np.float64, ensure_min_samples=1)
        if d_feat is not None and m.shape[1] != d_feat:
            raise ValueError(f"image {k}: region feature width {m.shape[1]}, expected {d_feat}")
        out.append(m)
    width = {m.shape[1] for m in out}
    if len(width) > 1:
        raise ValueError(f"images have different feature widths: {sorted(width)}")
    return out


def check_captions(y, n_images: int) -> List[List[str]]:
    """Each entry is a caption string or a list of them; returns lists of strings."""
    if len(y) != n_images:
        raise ValueError(f"got {len(y)} caption entries for {n_images} images")
    out = []
    for k, caps in enumerate(y):
        caps = [caps] if isinstance(caps, str) else list(caps)
        if not caps:
            raise ValueError(f"image {k} has no captions")
        out.append(caps)
    return out


class MCTCaptioner(BaseEstimator):
    """Multimodal transformer captioner with optional ELMo word embeddings.

    ``fit(X, y)`` takes a list of region-feature matrices and, per image, one or
    more reference captions. ``predict(X)`` returns caption strings and
    ``transform(X)`` the encoded image memories.
    """

    def __init__(self, mode="MCT", d_model=32, n_heads=4, d_head=8, d_ffn=64, depth=2, max_len=20,
                 elmo_layers=1, d_char=16, max_word_len=12, lr=3e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 epochs=500, lr_decay_every=0, lr_decay_factor=0.5, batch_size=16, clip_norm=5.0,
                 min_count=1, seed=0, threads=1, beam=1):
        self.mode = mode
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_head
        self.d_ffn = d_ffn
        self.depth = depth
        self.max_len = max_len
        self.elmo_layers = elmo_layers
        self.d_char = d_char
        self.max_word_len = max_word_len
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.epochs = epochs
        self.lr_decay_every = lr_decay_every
        self.lr_decay_factor = lr_decay_factor
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.min_count = min_count
        self.seed = seed
        self.threads = threads
        self.beam = beam

    # -- conversions -----------------------------------------------------

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> "MCTCaptioner":
        e, t = cfg.encoder, cfg.train
        return cls(mode=cfg.mode, d_model=e.d_model, n_heads=e.n_heads, d_head=e.d_head, d_ffn=e.d_ffn,
                   depth=e.depth, max_len=cfg.decoder.max_len, elmo_layers=cfg.elmo.layers,
                   d_char=cfg.elmo.d_char, max_word_len=cfg.elmo.max_word_len, lr=t.lr, beta1=t.beta1,
                   beta2=t.beta2, eps=t.eps, epochs=t.epochs, lr_decay_every=t.lr_decay_every,
                   lr_decay_factor=t.lr_decay_factor, batch_size=t.batch_size, clip_norm=t.clip_norm,
                   min_count=cfg.min_count, seed=t.seed, threads=t.threads)

    def _configs(self, d_feat: int):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        enc = EncoderConfig(d_feat=d_feat, d_model=self.d_model, n_heads=self.n_heads, d_head=self.d_head,
                            d_ffn=self.d_ffn, depth=self.depth)
        dec = DecoderConfig(d_model=self.d_model, n_heads=self.n_heads, d_head=self.d_head, d_ffn=self.d_ffn,
                            depth=self.depth, max_len=self.max_len)
        elmo = ElmoConfig(layers=self.elmo_layers, emb=self.d_model, d_char=self.d_char,
                          max_word_len=self.max_word_len)
        tr = TrainConfig(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps, epochs=self.epochs,
                         lr_decay_every=self.lr_decay_every, lr_decay_factor=self.lr_decay_factor,
                         batch_size=self.batch_size, seed=self.seed, mode=self.mode,
                         clip_norm=self.clip_norm, threads=self.threads)
        return enc, dec, elmo, tr

    # -- estimator API ---------------------------------------------------

    def fit(self, X, y, on_epoch: Optional[Callable[[int, float, float], None]] = None,
            vocab: Optional[Vocabulary] = None):
        X = check_region_features(X)
        y = check_captions(y, len(X))
        enc, dec, elmo, tr = self._configs(X[0].shape[1])
        self.vocab_ = vocab if vocab is not None else build_vocab(
            [c for caps in y for c in caps], self.min_count)
        self.model_ = CaptionModel.initialize(enc, dec, elmo, self.vocab_, self.mode, self.seed)
        examples = [Example(str(k), m, tokenize(c)) for k, (m, caps) in enumerate(zip(X, y)) for c in caps]
        result = train(self.model_, examples, tr, on_epoch)
        self.history_ = result.history
        self.train_config_ = tr
        self.n_features_in_ = X[0].shape[1]
        return self

    def predict(self, X, beam: Optional[int] = None) -> List[str]:
        check_is_fitted(self, "model_")
        X = check_region_features(X, self.n_features_in_)
        b = self.beam if beam is None else beam
        return [" ".join(self.model_.caption(m, b)) for m in X]

    def transform(self, X) -> List[np.ndarray]:
        check_is_fitted(self, "model_")
        X = check_region_features(X, self.n_features_in_)
        bound = self.model_.bind()
        return [self.model_.encode(m, bound).data for m in X]

    def _corpus(self, X, y, beam):
        X = check_region_features(X, getattr(self, "n_features_in_", None))
        y = check_captions(y, len(X))
        preds = self.predict(X, beam)
        return build_corpus({str(k): tokenize(p) for k, p in enumerate(preds)},
                            {str(k): caps for k, caps in enumerate(y)})

    def evaluate(self, X, y, beam: Optional[int] = None) -> EvalReport:
        return score_corpus(self._corpus(X, y, beam))

    def score(self, X, y) -> float:
        """CIDEr-D of the predicted captions against ``y``."""
        return cider_d(self._corpus(X, y, None))

    # -- persistence -----------------------------------------------------

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(self.model_, path, self.train_config_)

    @classmethod
    def load(cls, path) -> "MCTCaptioner":
        model, tr = load_checkpoint(path)
        e = model.encoder_cfg
        est = cls(mode=model.mode, d_model=e.d_model, n_heads=e.n_heads, d_head=e.d_head, d_ffn=e.d_ffn,
                  depth=e.depth, max_len=model.decoder_cfg.max_len, elmo_layers=model.elmo_cfg.layers,
                  d_char=model.elmo_cfg.d_char, max_word_len=model.elmo_cfg.max_word_len,
                  min_count=model.vocab.min_count)
        if tr is not None:
            est.set_params(lr=tr.lr, beta1=tr.beta1, beta2=tr.beta2, eps=tr.eps, epochs=tr.epochs,
                           lr_decay_every=tr.lr_decay_every, lr_decay_factor=tr.lr_decay_factor,
                           batch_size=tr.batch_size, clip_norm=tr.clip_norm, seed=tr.seed,
                           threads=tr.threads)
        est.model_ = model
        est.vocab_ = model.vocab
        est.train_config_ = tr
        est.history_ = []
        est.n_features_in_ = e.d_feat
        return est

