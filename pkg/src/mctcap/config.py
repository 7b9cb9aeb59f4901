"""Run configuration: one JSON document covering model, ELMo, training and paths."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .decoder import MODES, DecoderConfig
from .embedder import ElmoConfig
from .encoder import EncoderConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    features: Optional[str] = None
    captions: Optional[str] = None
    splits: Optional[str] = None
    checkpoint: Optional[str] = None
    vocab: Optional[str] = None


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    elmo: ElmoConfig = field(default_factory=ElmoConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: Paths = field(default_factory=Paths)
    mode: str = "MCT"
    min_count: int = 5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.encoder.d_model != self.decoder.d_model:
            raise ConfigError("encoder.d_model and decoder.d_model differ")
        if self.encoder.depth != self.decoder.depth:
            raise ConfigError("encoder.depth and decoder.depth must match")
        if self.mode == "ELMo-MCT" and self.elmo.emb != self.decoder.d_model:
            raise ConfigError(f"elmo.emb ({self.elmo.emb}) must equal d_model ({self.decoder.d_model})")
        if self.min_count < 1:
            raise ConfigError("min_count must be >= 1")
        self.train.mode = self.mode

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "RunConfig":
        sections = {"encoder": EncoderConfig, "decoder": DecoderConfig, "elmo": ElmoConfig,
                    "train": TrainConfig, "paths": Paths}
        unknown = set(doc) - set(sections) - {"mode", "min_count"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        mode = doc.get("mode", "MCT")
        kwargs: Dict[str, Any] = {"mode": mode, "min_count": doc.get("min_count", 5)}
        for name, klass in sections.items():
            sub = dict(doc.get(name) or {})
            allowed = {f.name for f in fields(klass)}
            bad = set(sub) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            if name == "train":
                sub["mode"] = mode
            try:
                kwargs[name] = klass(**sub)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{name}: {exc}") from None
        return cls(**kwargs)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(doc)

    def with_depth(self, depth: int) -> "RunConfig":
        doc = self.to_dict()
        doc["encoder"]["depth"] = depth
        doc["decoder"]["depth"] = depth
        return RunConfig.from_dict(doc)


def desk_config(mode: str = "MCT", **train_overrides) -> RunConfig:
    """Desk-scale dimensions and the training settings used for the toy dataset."""
    train = dict(lr=3e-3, epochs=500, batch_size=16, lr_decay_every=0, seed=0)
    train.update(train_overrides)
    return RunConfig(
        encoder=EncoderConfig.desk(), decoder=DecoderConfig.desk(), elmo=ElmoConfig.desk(),
        train=TrainConfig(mode=mode, **train), mode=mode, min_count=1,
    )
