"""Caption quality metrics.

All functions take token lists produced by :func:`tokenize`.  Conventions:
BLEU uses closest-reference brevity penalty; ROUGE-L is the LCS F-measure
with beta = 1.2; CIDEr-D uses n = 1..4, a Gaussian length penalty with
sigma = 6, clipped tf-idf and a x10 scale.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .errors import CorpusStatsError, DegenerateVectorError

Tokens = Sequence[str]

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CLIP_WEIGHT = 2.5
BLEU_EPS = 1e-9

METRIC_NAMES = ("bleu@1", "bleu@2", "bleu@3", "bleu@4", "rouge_l", "cider_d",
                "clip_score", "ref_clip", "ndcg")
_BOUNDS = {"rouge_l": (0.0, 1.0), "cider_d": (0.0, 10.0), "clip_score": (0.0, 2.5),
           "ndcg": (0.0, 1.0), "ref_clip": (0.0, 2.5)}
for _n in range(1, 5):
    _BOUNDS[f"bleu@{_n}"] = (0.0, 1.0)


@dataclass(frozen=True)
class MetricScore:
    name: str
    value: float

    def __post_init__(self):
        if self.name not in _BOUNDS:
            raise ValueError(f"unknown metric {self.name!r}")
        lo, hi = _BOUNDS[self.name]
        if not lo - 1e-9 <= self.value <= hi + 1e-9:
            raise ValueError(f"{self.name}={self.value} outside [{lo}, {hi}]")


_PUNCT = re.compile(r"[^\w\s]|_")


def tokenize(text: str) -> list[str]:
    """Lowercase, turn punctuation into spaces, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU --------------------------------------------------------------------

def _closest_ref_len(c: int, references: Sequence[Tokens]) -> int:
    return min((abs(len(r) - c), len(r)) for r in references)[1]


def _clipped_counts(candidate: Tokens, references: Sequence[Tokens], n: int) -> tuple[int, int]:
    cand = ngrams(candidate, n)
    max_ref: Counter = Counter()
    for ref in references:
        for g, c in ngrams(ref, n).items():
            if c > max_ref[g]:
                max_ref[g] = c
    matched = sum(min(c, max_ref[g]) for g, c in cand.items())
    return matched, max(0, len(candidate) - n + 1)


def _combine(matched: Sequence[int], totals: Sequence[int], c: int, r: int,
             smooth: bool) -> float:
    if c == 0 or matched[0] == 0:
        return 0.0
    logs = 0.0
    for m, t in zip(matched, totals):
        p = m / t if t else 0.0
        if p == 0.0:
            if not smooth:
                return 0.0
            p = BLEU_EPS
        logs += math.log(p)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(logs / len(matched))


def bleu(candidate: Tokens, references: Sequence[Tokens], n: int = 4,
         smooth: bool = False) -> float:
    """Sentence BLEU@n.

    With ``smooth`` a zero precision at some order is replaced by 1e-9,
    unless nothing matches at all (then the score stays 0).
    """
    if not 1 <= n <= 4:
        raise ValueError(f"BLEU order must be in 1..4, got {n}")
    if not references or not any(references):
        raise ValueError("BLEU needs at least one non-empty reference")
    counts = [_clipped_counts(candidate, references, m) for m in range(1, n + 1)]
    c = len(candidate)
    return _combine([m for m, _ in counts], [t for _, t in counts], c,
                    _closest_ref_len(c, references), smooth)


def corpus_bleu(candidates: Sequence[Tokens], references: Sequence[Sequence[Tokens]],
                n: int = 4) -> float:
    """Corpus BLEU@n: counts and lengths are summed before the ratios."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    matched = [0] * n
    totals = [0] * n
    c = r = 0
    for cand, refs in zip(candidates, references):
        if not refs or not any(refs):
            raise ValueError("BLEU needs at least one non-empty reference per item")
        for m in range(1, n + 1):
            a, b = _clipped_counts(cand, refs, m)
            matched[m - 1] += a
            totals[m - 1] += b
        c += len(cand)
        r += _closest_ref_len(len(cand), refs)
    return _combine(matched, totals, c, r, smooth=False)


# -- ROUGE-L -----------------------------------------------------------------

def lcs_length(a: Tokens, b: Tokens) -> int:
    vocab: dict[str, int] = {}
    ia = np.array([vocab.setdefault(t, len(vocab)) for t in a], dtype=np.int64)
    ib = np.array([vocab.setdefault(t, len(vocab)) for t in b], dtype=np.int64)
    return kernels.lcs_length(ia, ib)


def rouge_l(candidate: Tokens, references: Sequence[Tokens], beta: float = ROUGE_BETA) -> float:
    if not references:
        raise ValueError("ROUGE-L needs at least one reference")
    if not candidate:
        return 0.0
    best = 0.0
    for ref in references:
        if not ref:
            continue
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        p = lcs / len(candidate)
        r = lcs / len(ref)
        f = (1 + beta ** 2) * p * r / (r + beta ** 2 * p)
        best = max(best, f)
    return best


# -- CIDEr-D -----------------------------------------------------------------

@dataclass(frozen=True)
class CorpusStats:
    """Document frequencies (images containing an n-gram in any reference)."""

    df: Mapping[tuple, int]
    n_images: int
    max_n: int = 4
    log_n: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "log_n", math.log(self.n_images) if self.n_images else 0.0)

    @classmethod
    def build(cls, corpus: Iterable[Sequence[Tokens]], max_n: int = 4) -> "CorpusStats":
        df: Counter = Counter()
        n_images = 0
        for refs in corpus:
            n_images += 1
            seen = set()
            for ref in refs:
                for m in range(1, max_n + 1):
                    seen.update(ngrams(ref, m))
            df.update(seen)
        return cls(dict(df), n_images, max_n)

    def idf(self, gram: tuple) -> float:
        return self.log_n - math.log(max(1.0, self.df.get(gram, 0)))


def _tfidf(tokens: Tokens, stats: CorpusStats):
    # squared norms: sqrt(a * a) == a exactly, so a caption scored against
    # itself gets a cosine of exactly 1
    vecs, sq = [], []
    for m in range(1, stats.max_n + 1):
        vec = {g: c * stats.idf(g) for g, c in ngrams(tokens, m).items()}
        vecs.append(vec)
        sq.append(sum(x * x for x in vec.values()))
    return vecs, sq


def cider_d(candidate: Tokens, references: Sequence[Tokens], stats: CorpusStats,
            sigma: float = CIDER_SIGMA) -> float:
    if stats.n_images == 0:
        raise CorpusStatsError("corpus statistics are empty")
    if not references:
        raise ValueError("CIDEr-D needs at least one reference")
    hyp, hyp_sq = _tfidf(candidate, stats)
    total = 0.0
    for ref_tokens in references:
        ref, ref_sq = _tfidf(ref_tokens, stats)
        delta = len(candidate) - len(ref_tokens)
        penalty = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
        per_n = 0.0
        for m in range(stats.max_n):
            if hyp_sq[m] == 0.0 or ref_sq[m] == 0.0:
                continue
            dot = sum(min(w, ref[m][g]) * ref[m][g] for g, w in hyp[m].items() if g in ref[m])
            per_n += dot / math.sqrt(hyp_sq[m] * ref_sq[m]) * penalty
        total += per_n / stats.max_n
    return 10.0 * total / len(references)


# -- embedding based ---------------------------------------------------------

def _cos(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("zero vector in CLIP score")
    return float(np.dot(a, b) / (na * nb))


def clip_scores(image_emb, candidate_emb, reference_embs=()) -> tuple[float, float]:
    """``(clip_score, ref_clip)``; ref_clip is the harmonic mean of clip_score
    and the best clamped candidate/reference cosine."""
    cs = CLIP_WEIGHT * max(_cos(image_emb, candidate_emb), 0.0)
    if len(reference_embs) == 0:
        return cs, 0.0
    ref = max(max(_cos(candidate_emb, r), 0.0) for r in reference_embs)
    rc = 0.0 if cs + ref == 0.0 else 2.0 * cs * ref / (cs + ref)
    return cs, rc


# -- ranking and statistics --------------------------------------------------

def ndcg(ranked_items: Sequence, relevant, cutoff: int) -> float:
    """Binary-gain nDCG@cutoff with a log2(rank + 1) discount."""
    if cutoff < 1:
        raise ValueError("cutoff must be >= 1")
    relevant = set(relevant)
    if not relevant:
        return 0.0
    dcg = sum(1.0 / math.log2(r + 2) for r, item in enumerate(ranked_items[:cutoff])
              if item in relevant)
    ideal = sum(1.0 / math.log2(r + 2) for r in range(min(len(relevant), cutoff)))
    return dcg / ideal


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("pearson needs two equal-length lists of >= 2 values")
    return float(np.corrcoef(a, b)[0, 1])


def mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def score(metric: str, candidate: Tokens, references: Sequence[Tokens],
          stats: CorpusStats | None = None) -> float:
    """Per-item text metric by name (used as the refinement threshold)."""
    if metric.startswith("bleu@"):
        return bleu(candidate, references, int(metric[5:]), smooth=True)
    if metric == "rouge_l":
        return rouge_l(candidate, references)
    if metric == "cider_d":
        if stats is None:
            raise CorpusStatsError("cider_d needs corpus statistics")
        return cider_d(candidate, references, stats)
    raise ValueError(f"{metric!r} is not a per-item text metric")


TEXT_METRICS = ("bleu@1", "bleu@2", "bleu@3", "bleu@4", "rouge_l", "cider_d")
