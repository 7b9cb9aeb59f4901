"""Corpus-level caption metrics: BLEU-1..4, ROUGE-L and CIDEr-D."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

Tokens = Sequence[str]

COLUMNS = ("A1", "A2", "A3", "A4", "R", "C")


@dataclass
class EvalCorpus:
    """``image_id -> (candidate tokens, list of reference token lists)``."""

    items: Dict[str, Tuple[List[str], List[List[str]]]]

    def __post_init__(self):
        for image_id, (_, refs) in self.items.items():
            if not refs:
                raise ValueError(f"image {image_id!r} has no reference captions")

    def __len__(self) -> int:
        return len(self.items)

    def values(self):
        return self.items.values()


def _require(corpus: EvalCorpus) -> None:
    if len(corpus) == 0:
        raise ValueError("evaluation corpus is empty")


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


def _closest_ref_len(c: int, refs: Sequence[Tokens]) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def bleu(corpus: EvalCorpus, n: int = 4) -> float:
    """Corpus BLEU-n (percent): pooled clipped precisions, closest-length brevity penalty."""
    _require(corpus)
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be in 1..4, got {n}")
    matched = [0] * n
    total = [0] * n
    cand_len = ref_len = 0
    for cand, refs in corpus.values():
        cand_len += len(cand)
        ref_len += _closest_ref_len(len(cand), refs)
        for k in range(1, n + 1):
            counts = ngrams(cand, k)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= ngrams(r, k)
            matched[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[k - 1] += max(len(cand) - k + 1, 0)
    if cand_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * bp * math.exp(log_p)


# ---------------------------------------------------------------------------
# ROUGE-L


def lcs_length(a: Tokens, b: Tokens) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(cand: Tokens, refs: Sequence[Tokens], beta: float = 1.2) -> float:
    best = 0.0
    for r in refs:
        lcs = lcs_length(cand, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(cand), lcs / len(r)
        f = (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p)
        best = max(best, f)
    return best


def rouge_l(corpus: EvalCorpus, beta: float = 1.2) -> float:
    """Mean over images of the best LCS F-measure against any reference (percent)."""
    _require(corpus)
    scores = [rouge_l_sentence(c, refs, beta) for c, refs in corpus.values()]
    return 100.0 * sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# CIDEr-D


def _tfidf(counts: Counter, df: Counter, log_n: float) -> Tuple[Dict, float]:
    vec = {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in counts.items()}
    return vec, math.sqrt(sum(v * v for v in vec.values()))


def cider_d(corpus: EvalCorpus, n: int = 4, sigma: float = 6.0) -> float:
    """CIDEr-D with idf from the corpus references, clipping, Gaussian length penalty, x10."""
    _require(corpus)
    df: Counter = Counter()
    for _, refs in corpus.values():
        seen = set()
        for r in refs:
            for k in range(1, n + 1):
                seen.update(ngrams(r, k))
        df.update(seen)
    log_n = math.log(len(corpus))

    total = 0.0
    for cand, refs in corpus.values():
        per_order = [0.0] * n
        for k in range(1, n + 1):
            vc, nc = _tfidf(ngrams(cand, k), df, log_n)
            for r in refs:
                vr, nr = _tfidf(ngrams(r, k), df, log_n)
                dot = sum(min(v, vr.get(g, 0.0)) * vr.get(g, 0.0) for g, v in vc.items())
                sim = dot / (nc * nr) if nc and nr else 0.0
                delta = len(cand) - len(r)
                per_order[k - 1] += sim * math.exp(-delta * delta / (2.0 * sigma ** 2))
        total += sum(per_order) / n / len(refs) * 10.0
    return total / len(corpus)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    A1: float
    A2: float
    A3: float
    A4: float
    R: float
    C: float

    def values(self) -> List[float]:
        return [getattr(self, k) for k in COLUMNS]

    def tsv_row(self, label: str) -> str:
        return "\t".join([label] + [f"{v:.2f}" for v in self.values()])

    def to_json(self, model: str) -> str:
        return json.dumps({"model": model, **asdict(self)})


def score_corpus(corpus: EvalCorpus) -> EvalReport:
    """All six table columns; C is CIDEr-D x 100, the usual published scale."""
    return EvalReport(
        A1=bleu(corpus, 1), A2=bleu(corpus, 2), A3=bleu(corpus, 3), A4=bleu(corpus, 4),
        R=rouge_l(corpus), C=100.0 * cider_d(corpus),
    )


def format_table(rows: Iterable[Tuple[str, EvalReport]], first_column: str = "Model") -> str:
    lines = ["\t".join((first_column,) + COLUMNS)]
    lines += [report.tsv_row(str(label)) for label, report in rows]
    return "\n".join(lines) + "\n"


# published MCT ablation rows, kept as table-format fixtures (not reproduced here)
REPORTED_ABLATION = {
    "BottomUP-LSTM": EvalReport(78.65, 59.06, 46.35, 34.27, 57.71, 111.04),
    "MCT": EvalReport(78.75, 61.88, 46.77, 35.10, 57.92, 113.96),
    "ELMo-MCT": EvalReport(79.38, 62.60, 47.50, 35.63, 58.33, 116.15),
}
