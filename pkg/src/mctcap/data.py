"""Region-feature and caption files, splits, batching, and the synthetic toy set."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .embedder import PAD, Vocabulary, tokenize

FEATURE_MAGIC = b"MCTF"
FEATURE_VERSION = 1

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle", "star")

PathLike = Union[str, Path]


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class FeatureFile:
    records: "OrderedDict[str, np.ndarray]"
    d_feat: int

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, image_id: str) -> np.ndarray:
        try:
            return self.records[image_id]
        except KeyError:
            raise KeyError(f"unknown image id {image_id!r}") from None

    @property
    def image_ids(self) -> List[str]:
        return list(self.records)


@dataclass
class CaptionFile:
    captions: "OrderedDict[str, List[str]]"

    def __len__(self) -> int:
        return len(self.captions)

    def __getitem__(self, image_id: str) -> List[str]:
        return self.captions[image_id]


@dataclass
class SplitSpec:
    train: List[str] = field(default_factory=list)
    val: List[str] = field(default_factory=list)
    test: List[str] = field(default_factory=list)

    def __post_init__(self):
        seen: Dict[str, str] = {}
        for name in ("train", "val", "test"):
            for i in getattr(self, name):
                if i in seen:
                    raise DataError(f"image id {i!r} appears in both {seen[i]} and {name}")
                seen[i] = name

    def get(self, name: str) -> List[str]:
        if name not in ("train", "val", "test"):
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)

    def save(self, path: PathLike) -> None:
        Path(path).write_text(json.dumps({"train": self.train, "val": self.val, "test": self.test}),
                              encoding="utf-8")

    @classmethod
    def load(cls, path: PathLike) -> "SplitSpec":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid split JSON: {exc}") from None
        unknown = set(doc) - {"train", "val", "test"}
        if unknown:
            raise DataError(f"{path}: unknown split keys {sorted(unknown)}")
        return cls(list(doc.get("train", [])), list(doc.get("val", [])), list(doc.get("test", [])))


# ---------------------------------------------------------------------------
# feature files


def _check_record(image_id, matrix: np.ndarray, d_feat: Optional[int], where: str) -> None:
    if matrix.ndim != 2 or matrix.shape[0] < 1:
        raise DataError(f"{where}: record {image_id!r} needs N >= 1 rows, got shape {matrix.shape}")
    if d_feat is not None and matrix.shape[1] != d_feat:
        raise DataError(f"{where}: record {image_id!r} has width {matrix.shape[1]} but earlier "
                        f"records have width {d_feat}")
    if not np.all(np.isfinite(matrix)):
        raise DataError(f"{where}: record {image_id!r} contains NaN or Inf")


def _add_record(records, image_id, matrix, d_feat, where):
    _check_record(image_id, matrix, d_feat, where)
    if image_id in records:
        raise DataError(f"{where}: duplicate image id {image_id!r}")
    records[image_id] = matrix
    return matrix.shape[1]


def write_features_jsonl(path: PathLike, records: Dict[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, m in records.items():
            m32 = np.asarray(m, dtype=np.float32)
            fh.write(json.dumps({
                "image_id": image_id,
                "num_regions": int(m32.shape[0]),
                "dim": int(m32.shape[1]),
                "features": [[float(v) for v in row] for row in m32],
            }) + "\n")


def write_features_binary(path: PathLike, records: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<I", FEATURE_VERSION))
        for image_id, m in records.items():
            m32 = np.ascontiguousarray(m, dtype="<f4")
            raw_id = image_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_id)) + raw_id)
            fh.write(struct.pack("<II", m32.shape[0], m32.shape[1]))
            fh.write(m32.tobytes())


def _read_jsonl_features(path: Path) -> FeatureFile:
    records: "OrderedDict[str, np.ndarray]" = OrderedDict()
    d_feat = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                doc = json.loads(line)
                image_id = doc["image_id"]
                n, dim = int(doc["num_regions"]), int(doc["dim"])
                # stored values are f32 on disk whatever the encoding
                m = np.asarray(doc["features"], dtype=np.float32).astype(np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{where}: malformed feature record ({exc})") from None
            if m.shape != (n, dim):
                raise DataError(f"{where}: features shape {m.shape} does not match "
                                f"num_regions={n}, dim={dim}")
            d_feat = _add_record(records, image_id, m, d_feat, where)
    if not records:
        raise DataError(f"{path}: feature file is empty")
    return FeatureFile(records, d_feat)


def _read_binary_features(path: Path) -> FeatureFile:
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic bytes, not an MCTF feature file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature file version {version}")
    records: "OrderedDict[str, np.ndarray]" = OrderedDict()
    d_feat = None
    off = 8
    while off < len(raw):
        where = f"{path}@{off}"
        try:
            (id_len,) = struct.unpack_from("<I", raw, off)
            off += 4
            image_id = raw[off:off + id_len].decode("utf-8")
            if len(image_id.encode("utf-8")) != id_len:
                raise struct.error("truncated id")
            off += id_len
            n, dim = struct.unpack_from("<II", raw, off)
            off += 8
            nbytes = 4 * n * dim
            if off + nbytes > len(raw):
                raise struct.error("truncated payload")
            m = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=off).reshape(n, dim)
            off += nbytes
        except (struct.error, UnicodeDecodeError) as exc:
            raise DataError(f"{where}: malformed feature record ({exc})") from None
        d_feat = _add_record(records, image_id, m.astype(np.float64), d_feat, where)
    if not records:
        raise DataError(f"{path}: feature file is empty")
    return FeatureFile(records, d_feat)


def read_features(path: PathLike, format: Optional[str] = None) -> FeatureFile:
    """Load a feature file; ``format`` is ``"jsonl"`` or ``"binary"`` (guessed from the suffix)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature file not found: {path}")
    if format is None:
        format = "jsonl" if path.suffix in (".jsonl", ".json") else "binary"
    if format == "jsonl":
        return _read_jsonl_features(path)
    if format == "binary":
        return _read_binary_features(path)
    raise DataError(f"unknown feature format {format!r}")


# ---------------------------------------------------------------------------
# captions


def write_captions(path: PathLike, captions: Dict[str, List[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, caps in captions.items():
            fh.write(json.dumps({"image_id": image_id, "captions": list(caps)}) + "\n")


def read_captions(path: PathLike, features: Optional[FeatureFile] = None) -> CaptionFile:
    path = Path(path)
    if not path.exists():
        raise DataError(f"caption file not found: {path}")
    out: "OrderedDict[str, List[str]]" = OrderedDict()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                image_id, caps = doc["image_id"], list(doc["captions"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed caption record ({exc})") from None
            if not caps:
                raise DataError(f"{path}:{lineno}: image {image_id!r} has no captions")
            if features is not None and image_id not in features.records:
                raise DataError(f"{path}:{lineno}: image {image_id!r} has no features")
            out[image_id] = caps
    if not out:
        raise DataError(f"{path}: caption file is empty")
    return CaptionFile(out)


# ---------------------------------------------------------------------------
# splits


def make_splits(ids: Sequence[str], spec=None, ratio: Sequence[float] = (8, 1, 1), seed: int = 0) -> SplitSpec:
    """Honour an explicit ``spec`` (SplitSpec or dict of lists), else shuffle and slice by ``ratio``."""
    if spec is not None:
        if isinstance(spec, SplitSpec):
            spec = {"train": spec.train, "val": spec.val, "test": spec.test}
        out = SplitSpec(list(spec.get("train", [])), list(spec.get("val", [])), list(spec.get("test", [])))
        missing = set(out.train + out.val + out.test) - set(ids)
        if missing:
            raise DataError(f"split references unknown image ids: {sorted(missing)[:5]}")
        return out
    ids = list(ids)
    ratio = np.asarray(ratio, dtype=np.float64)
    if ratio.shape != (3,) or np.any(ratio < 0) or ratio.sum() <= 0:
        raise DataError(f"ratio must be three non-negative weights, got {list(ratio)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_val = int(round(len(ids) * ratio[1] / ratio.sum()))
    n_test = int(round(len(ids) * ratio[2] / ratio.sum()))
    n_train = len(ids) - n_val - n_test
    if n_train < 0:
        raise DataError("split ratio leaves no room for training images")
    shuffled = [ids[i] for i in order]
    return SplitSpec(shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:])


# ---------------------------------------------------------------------------
# batching


@dataclass
class Example:
    image_id: str
    features: np.ndarray
    tokens: List[str]


@dataclass
class Batch:
    features: np.ndarray      # (B, N_max, d_feat), zero rows where padded
    region_mask: np.ndarray   # (B, N_max), True for real regions
    tokens: np.ndarray        # (B, G_max) ids: bos ... eos pad ...
    token_mask: np.ndarray    # (B, G_max), True for non-pad
    image_ids: List[str]

    def __len__(self) -> int:
        return len(self.image_ids)

    @property
    def inputs(self) -> np.ndarray:
        return self.tokens[:, :-1]

    @property
    def targets(self) -> np.ndarray:
        return self.tokens[:, 1:]

    @property
    def target_mask(self) -> np.ndarray:
        return self.token_mask[:, 1:]


def make_examples(features: FeatureFile, captions: CaptionFile, ids: Sequence[str]) -> List[Example]:
    """One example per (image, caption) pair, in id order then caption order."""
    out = []
    for i in ids:
        if i not in features.records:
            raise DataError(f"image {i!r} has no features")
        if i not in captions.captions:
            raise DataError(f"image {i!r} has no captions")
        for cap in captions[i]:
            out.append(Example(i, features[i], tokenize(cap)))
    return out


def collate(examples: Sequence[Example], vocab: Vocabulary) -> Batch:
    B = len(examples)
    n_max = max(e.features.shape[0] for e in examples)
    d = examples[0].features.shape[1]
    seqs = [vocab.encode(e.tokens) for e in examples]
    g_max = max(len(s) for s in seqs)
    feats = np.zeros((B, n_max, d))
    rmask = np.zeros((B, n_max), dtype=bool)
    toks = np.full((B, g_max), PAD, dtype=np.int64)
    tmask = np.zeros((B, g_max), dtype=bool)
    for b, (e, s) in enumerate(zip(examples, seqs)):
        n = e.features.shape[0]
        feats[b, :n] = e.features
        rmask[b, :n] = True
        toks[b, :len(s)] = s
        tmask[b, :len(s)] = True
    return Batch(feats, rmask, toks, tmask, [e.image_id for e in examples])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Seeded Fisher-Yates permutation keyed by ``(seed, epoch)``."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(examples: Sequence[Example], vocab: Vocabulary, batch_size: int, seed: int = 0,
            epoch: int = 0, shuffle: bool = True) -> Iterator[Batch]:
    if not examples:
        raise DataError("cannot batch an empty split")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_order(len(examples), seed, epoch) if shuffle else np.arange(len(examples))
    for start in range(0, len(order), batch_size):
        yield collate([examples[i] for i in order[start:start + batch_size]], vocab)


# ---------------------------------------------------------------------------
# synthetic toy data


def _hadamard(n: int) -> np.ndarray:
    h = np.array([[1.0]])
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h


def toy_patterns(d_feat: int = 16) -> Tuple[np.ndarray, np.ndarray]:
    """Orthonormal colour and shape patterns (rows of a normalised Hadamard matrix)."""
    need = 1 + len(COLORS) + len(SHAPES)
    if d_feat < need or d_feat & (d_feat - 1):
        raise ValueError(f"toy d_feat must be a power of two >= {need}, got {d_feat}")
    h = _hadamard(d_feat) / np.sqrt(d_feat)
    return h[1:1 + len(COLORS)], h[1 + len(COLORS):need]


def toy_caption(pairs: Sequence[Tuple[int, int]]) -> str:
    ordered = sorted(pairs)
    return " and ".join(f"a {COLORS[c]} {SHAPES[s]}" for c, s in ordered)


def toy_dataset(seed: int = 7, n_images: int = 64, d_feat: int = 16, noise: float = 0.05,
                min_regions: int = 2, max_regions: int = 4) -> Tuple[FeatureFile, CaptionFile]:
    """Images made of 2-4 distinct (colour, shape) regions; the caption lists them in sorted order.

    Features are rounded to float32 so they survive both file encodings unchanged.
    """
    if n_images < 2:
        raise ValueError(f"toy dataset needs at least 2 images, got {n_images}")
    rng = np.random.default_rng(seed)
    color_pat, shape_pat = toy_patterns(d_feat)
    all_pairs = [(c, s) for c in range(len(COLORS)) for s in range(len(SHAPES))]
    feats: "OrderedDict[str, np.ndarray]" = OrderedDict()
    caps: "OrderedDict[str, List[str]]" = OrderedDict()
    for k in range(n_images):
        n = int(rng.integers(min_regions, max_regions + 1))
        chosen = [all_pairs[i] for i in rng.choice(len(all_pairs), size=n, replace=False)]
        rows = np.array([color_pat[c] + shape_pat[s] for c, s in chosen])
        rows = rows + rng.uniform(-noise, noise, size=rows.shape)
        image_id = f"toy{k:04d}"
        feats[image_id] = rows.astype(np.float32).astype(np.float64)
        caps[image_id] = [toy_caption(chosen)]
    return FeatureFile(feats, d_feat), CaptionFile(caps)


def toy_oracle_caption(matrix: np.ndarray) -> str:
    """Recover a toy caption from features by nearest-pattern matching per region."""
    color_pat, shape_pat = toy_patterns(matrix.shape[1])
    pairs = [(int(np.argmax(color_pat @ row)), int(np.argmax(shape_pat @ row))) for row in matrix]
    return toy_caption(pairs)
