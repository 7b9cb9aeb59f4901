"""Generate captions for a split and score them."""

from __future__ import annotations

from typing import Dict, List, Mapping, Sequence

from .data import CaptionFile, FeatureFile
from .embedder import tokenize
from .metrics import EvalCorpus, EvalReport, score_corpus
from .model import CaptionModel


def generate_all(model: CaptionModel, features: FeatureFile, ids: Sequence[str], beam: int = 1) -> Dict[str, List[str]]:
    return {i: model.caption(features[i], beam) for i in ids}


def build_corpus(candidates: Dict[str, List[str]], captions: Mapping[str, List[str]]) -> EvalCorpus:
    """Pair candidates with tokenised references; ``captions`` maps image id to raw strings."""
    return EvalCorpus({i: (list(c), [tokenize(r) for r in captions[i]]) for i, c in candidates.items()})


def evaluate(model: CaptionModel, features: FeatureFile, captions: CaptionFile, ids: Sequence[str],
             beam: int = 1) -> EvalReport:
    if not ids:
        raise ValueError("evaluation split is empty")
    return score_corpus(build_corpus(generate_all(model, features, ids, beam), captions.captions))
