"""Naive reference implementations of the caption metrics.

Written independently of ``mctcap.metrics``: plain loops, brute-force
subsequence enumeration, dense vectors. Slow, but obviously right.
"""

import itertools
import math


def grams(tokens, n):
    out = {}
    for i in range(len(tokens) - n + 1):
        key = " ".join(tokens[i:i + n])
        out[key] = out.get(key, 0) + 1
    return out


def naive_bleu(pairs, n):
    hits = [0] * n
    totals = [0] * n
    c_len = 0
    r_len = 0
    for cand, refs in pairs:
        c_len += len(cand)
        best = None
        for r in refs:
            d = abs(len(r) - len(cand))
            if best is None or d < best[0] or (d == best[0] and len(r) < best[1]):
                best = (d, len(r))
        r_len += best[1]
        for k in range(1, n + 1):
            cg = grams(cand, k)
            for g, cnt in cg.items():
                most = 0
                for r in refs:
                    most = max(most, grams(r, k).get(g, 0))
                hits[k - 1] += min(cnt, most)
            totals[k - 1] += max(0, len(cand) - k + 1)
    if c_len == 0 or 0 in hits:
        return 0.0
    prod = 1.0
    for h, t in zip(hits, totals):
        prod *= h / t
    geo = prod ** (1.0 / n)
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return 100 * bp * geo


def is_subsequence(sub, seq):
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


def brute_lcs(a, b):
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    for size in range(len(short), 0, -1):
        for idx in itertools.combinations(range(len(short)), size):
            if is_subsequence([short[i] for i in idx], long_):
                return size
    return 0


def naive_rouge(pairs, beta=1.2):
    total = 0.0
    for cand, refs in pairs:
        best = 0.0
        for r in refs:
            l = brute_lcs(cand, r)
            if l:
                p = l / len(cand)
                rc = l / len(r)
                best = max(best, (1 + beta * beta) * p * rc / (rc + beta * beta * p))
        total += best
    return 100 * total / len(pairs)


def naive_cider(pairs, n=4, sigma=6.0):
    n_img = len(pairs)
    vocab = sorted({g for _, refs in pairs for r in refs for k in range(1, n + 1) for g in grams(r, k)}
                   | {g for c, _ in pairs for k in range(1, n + 1) for g in grams(c, k)})
    doc_freq = {g: 0 for g in vocab}
    for _, refs in pairs:
        present = set()
        for r in refs:
            for k in range(1, n + 1):
                present |= set(grams(r, k))
        for g in present:
            doc_freq[g] += 1

    def vec(tokens, k):
        cg = grams(tokens, k)
        v = []
        for g in vocab:
            if len(g.split(" ")) != k:
                continue
            idf = math.log(n_img) - math.log(max(1, doc_freq[g]))
            v.append(cg.get(g, 0) * idf)
        return v

    score = 0.0
    for cand, refs in pairs:
        acc = 0.0
        for r in refs:
            for k in range(1, n + 1):
                vc, vr = vec(cand, k), vec(r, k)
                nc = math.sqrt(sum(x * x for x in vc))
                nr = math.sqrt(sum(x * x for x in vr))
                dot = sum(min(x, y) * y for x, y in zip(vc, vr))
                sim = dot / (nc * nr) if nc > 0 and nr > 0 else 0.0
                acc += sim * math.exp(-((len(cand) - len(r)) ** 2) / (2 * sigma * sigma))
        score += 10.0 * acc / n / len(refs)
    return score / n_img


def random_corpus(rng, n_images, words=("a", "b", "c", "d", "e"), max_len=7, max_refs=3):
    pairs = []
    for _ in range(n_images):
        cand = [str(rng.choice(words)) for _ in range(int(rng.integers(1, max_len + 1)))]
        refs = [[str(rng.choice(words)) for _ in range(int(rng.integers(1, max_len + 1)))]
                for _ in range(int(rng.integers(1, max_refs + 1)))]
        pairs.append((cand, refs))
    return pairs
