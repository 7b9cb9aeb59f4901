"""Teacher-forced cross-entropy training with Adam, plus checkpoint files."""

from __future__ import annotations

import json
import logging
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import Batch, Example, batches, collate
from .decoder import MODES, DecoderConfig
from .embedder import CharVocab, ElmoConfig, Vocabulary
from .encoder import EncoderConfig
from .model import CaptionModel
from .tensor import Tape, Tensor, as_tensor, backward

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MCTC"
CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointError(ValueError):
    """A checkpoint file is corrupt or incompatible."""


@dataclass
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    lr_decay_every: int = 10
    lr_decay_factor: float = 0.5
    batch_size: int = 50
    seed: int = 0
    mode: str = "MCT"
    clip_norm: Optional[float] = 5.0
    threads: int = 1

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based ``epoch`` under the step schedule."""
        if not self.lr_decay_every:
            return self.lr
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


# ---------------------------------------------------------------------------
# loss


def cross_entropy_loss(logits, targets, pad_mask=None) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over positions where ``pad_mask`` is True."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {logits.shape} and targets {targets.shape} disagree")
    mask = np.ones(targets.shape, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy_loss: every position is padding")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    w = mask / count
    value = np.array([-(picked * w).sum()])
    if logits.tape is None:
        return Tensor(value)

    def vjp(g):
        grad = np.exp(logp) * w[..., None]
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - w[..., None], axis=-1)
        return (g[0] * grad,)

    return logits.tape.record("cross_entropy", value, (logits,), vjp)


# ---------------------------------------------------------------------------
# optimiser


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads.get(k)
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        if g is None:
            new_p[k], new_m[k], new_v[k] = p, m, v
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


def clip_gradients(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> Tuple[Dict[str, np.ndarray], float]:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}, norm


# ---------------------------------------------------------------------------
# loop


def batch_loss(model: CaptionModel, batch: Batch, tape: Optional[Tape] = None) -> Tuple[Tensor, Dict[str, Tensor]]:
    bound = model.bind(tape)
    logits = model.logits(batch.features, batch.inputs, bound, batch.region_mask)
    return cross_entropy_loss(logits, batch.targets, batch.target_mask), bound


def loss_and_grads(model: CaptionModel, batch: Batch) -> Tuple[float, Dict[str, np.ndarray]]:
    tape = Tape()
    loss, bound = batch_loss(model, batch, tape)
    g = backward(tape, loss)
    return float(loss.data[0]), {k: g.get(t.node_id, np.zeros(t.shape)) for k, t in bound.items()}


def _shard(batch: Batch, parts: int) -> List[Batch]:
    idx = np.array_split(np.arange(len(batch)), min(parts, len(batch)))
    return [Batch(batch.features[i], batch.region_mask[i], batch.tokens[i], batch.token_mask[i],
                  [batch.image_ids[j] for j in i]) for i in idx if len(i)]


def parallel_loss_and_grads(model: CaptionModel, batch: Batch, pool: ThreadPoolExecutor,
                            threads: int) -> Tuple[float, Dict[str, np.ndarray]]:
    """Data-parallel gradient: shards on worker threads, token-weighted reduction."""
    shards = _shard(batch, threads)
    results = list(pool.map(lambda b: loss_and_grads(model, b), shards))
    counts = [int(b.target_mask.sum()) for b in shards]
    total = sum(counts)
    loss = sum(c * r[0] for c, r in zip(counts, results)) / total
    grads = {k: sum(c * r[1][k] for c, r in zip(counts, results)) / total for k in model.params}
    return loss, grads


@dataclass
class TrainResult:
    history: List[Tuple[int, float, float]]
    state: AdamState

    @property
    def losses(self) -> List[float]:
        return [h[1] for h in self.history]


def train(model: CaptionModel, examples: Sequence[Example], cfg: TrainConfig,
          on_epoch: Optional[Callable[[int, float, float], None]] = None) -> TrainResult:
    """Train ``model`` in place; returns the per-epoch ``(epoch, mean_loss, lr)`` history."""
    if not examples:
        raise ValueError("cannot train on an empty dataset")
    state = AdamState()
    history = []
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at(epoch)
            loss_sum, token_sum = 0.0, 0
            for b, batch in enumerate(batches(examples, model.vocab, cfg.batch_size, cfg.seed, epoch)):
                if pool is None:
                    loss, grads = loss_and_grads(model, batch)
                else:
                    loss, grads = parallel_loss_and_grads(model, batch, pool, cfg.threads)
                if not np.isfinite(loss):
                    raise NumericError(f"non-finite loss {loss} at epoch {epoch} batch {b} "
                                       f"(images {batch.image_ids[:4]}...)")
                grads, _ = clip_gradients(grads, cfg.clip_norm)
                model.params, state = adam_step(model.params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
                n = int(batch.target_mask.sum())
                loss_sum += loss * n
                token_sum += n
            mean = loss_sum / token_sum
            history.append((epoch, mean, lr))
            if on_epoch is not None:
                on_epoch(epoch, mean, lr)
            log.debug("epoch %d loss %.6f lr %g", epoch, mean, lr)
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(history, state)


def mean_loss(model: CaptionModel, examples: Sequence[Example]) -> float:
    batch = collate(list(examples), model.vocab)
    loss, _ = batch_loss(model, batch)
    return float(loss.data[0])


# ---------------------------------------------------------------------------
# checkpoints


def _header(model: CaptionModel, train_cfg: Optional[TrainConfig]) -> Dict:
    return {
        "mode": model.mode,
        "encoder": asdict(model.encoder_cfg),
        "decoder": asdict(model.decoder_cfg),
        "elmo": asdict(model.elmo_cfg),
        "train": None if train_cfg is None else asdict(train_cfg),
        "vocab": model.vocab.words[4:],
        "min_count": model.vocab.min_count,
        "chars": model.chars.chars,
        "manifest": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
    }


def save_checkpoint(model: CaptionModel, path: Union[str, Path], train_cfg: Optional[TrainConfig] = None) -> None:
    header = json.dumps(_header(model, train_cfg), sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in model.params.values())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_checkpoint(path: Union[str, Path]) -> Tuple[CaptionModel, Optional[TrainConfig]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: magic: expected {CHECKPOINT_MAGIC!r}, found {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: header: file truncated")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: version: expected {CHECKPOINT_VERSION}, found {version}")
    if 12 + hlen > len(raw):
        raise CheckpointError(f"{path}: header: truncated ({len(raw) - 12} of {hlen} bytes)")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: header: invalid JSON ({exc})") from None
    manifest = header.get("manifest")
    if not isinstance(manifest, list):
        raise CheckpointError(f"{path}: manifest: missing")
    sizes = [int(np.prod(e["shape"], dtype=np.int64)) for e in manifest]
    start = 12 + hlen
    end = start + 8 * sum(sizes)
    if end + 4 != len(raw):
        raise CheckpointError(f"{path}: payload: expected {end + 4 - start} bytes after header, "
                              f"found {len(raw) - start}")
    payload = raw[start:end]
    (crc,) = struct.unpack_from("<I", raw, end)
    if crc != zlib.crc32(payload) & 0xFFFFFFFF:
        raise CheckpointError(f"{path}: checksum: CRC32 mismatch")
    params = {}
    off = 0
    for entry, n in zip(manifest, sizes):
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=off).astype(np.float64)
        params[entry["name"]] = arr.reshape(entry["shape"])
        off += 8 * n
    model = CaptionModel(
        EncoderConfig(**header["encoder"]), DecoderConfig(**header["decoder"]), ElmoConfig(**header["elmo"]),
        header["mode"], Vocabulary(header["vocab"], min_count=header.get("min_count", 1)),
        CharVocab(header["chars"]), params)
    train_cfg = TrainConfig(**header["train"]) if header.get("train") else None
    return model, train_cfg
