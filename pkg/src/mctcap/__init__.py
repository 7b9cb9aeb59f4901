"""Multimodal transformer image captioning (MCT and ELMo-MCT) on a small numpy autodiff core."""

from .config import RunConfig, desk_config
from .estimator import MCTCaptioner
from .metrics import EvalCorpus, EvalReport, bleu, cider_d, lcs_length, rouge_l
from .model import CaptionModel

__version__ = "0.1.0"

__all__ = [
    "CaptionModel", "EvalCorpus", "EvalReport", "MCTCaptioner", "RunConfig", "bleu", "cider_d",
    "desk_config", "lcs_length", "rouge_l",
]
