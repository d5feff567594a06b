"""BLEU and CIDEr-D caption scores, plus the weighted reward used for SCST."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tokenizer import normalize

log = logging.getLogger(__name__)

MAX_N = 4
CIDER_SIGMA = 6.0


def ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def as_words(caption) -> list[str]:
    return normalize(caption) if isinstance(caption, str) else list(caption)


# ---------------------------------------------------------------------------
# BLEU


def _closest_ref_len(c: int, ref_lens: Sequence[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - c), r))


def bleu_sentence(candidate, references, max_n: int = MAX_N, eps: float = 1e-9) -> float:
    """Smoothed sentence BLEU-``max_n``.

    Zero clipped counts are replaced by ``eps`` before the geometric mean;
    the brevity penalty uses the reference length closest to the candidate.
    """
    cand = as_words(candidate)
    refs = [as_words(r) for r in references]
    if not refs:
        raise ValueError("BLEU needs at least one reference")
    if not cand:
        raise ValueError("BLEU needs a nonempty candidate")
    log_p = 0.0
    for n in range(1, max_n + 1):
        counts = ngrams(cand, n)
        max_ref: Counter = Counter()
        for r in refs:
            max_ref |= ngrams(r, n)
        clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
        total = max(sum(counts.values()), 1)
        log_p += math.log(max(clipped, eps) / total)
    c = len(cand)
    r = _closest_ref_len(c, [len(x) for x in refs])
    bp = math.exp(min(0.0, 1.0 - r / c))
    return bp * math.exp(log_p / max_n)


def bleu4_sentence(candidate, references, eps: float = 1e-9) -> float:
    return bleu_sentence(candidate, references, 4, eps)


def corpus_bleu(candidates, references_per_item, max_n: int = MAX_N) -> list[float]:
    """Unsmoothed corpus BLEU-1..``max_n`` (cumulative geometric means)."""
    clipped = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for cand, refs in zip(candidates, references_per_item):
        cand = as_words(cand)
        refs = [as_words(r) for r in refs]
        c_len += len(cand)
        if cand:
            r_len += _closest_ref_len(len(cand), [len(r) for r in refs])
        for n in range(1, max_n + 1):
            counts = ngrams(cand, n)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= ngrams(r, n)
            clipped[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += sum(counts.values())
    if c_len == 0:
        return [0.0] * max_n
    bp = math.exp(min(0.0, 1.0 - r_len / c_len))
    scores = []
    log_sum = 0.0
    for n in range(max_n):
        if clipped[n] == 0 or totals[n] == 0:
            scores.extend([0.0] * (max_n - n))
            break
        log_sum += math.log(clipped[n] / totals[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


# ---------------------------------------------------------------------------
# CIDEr-D


@dataclass(frozen=True)
class DocumentFrequency:
    """Per-n-gram count of corpus items whose references contain it."""

    counts: dict
    n_items: int

    @classmethod
    def from_references(cls, references_per_item, max_n: int = MAX_N) -> "DocumentFrequency":
        counts: Counter = Counter()
        n_items = 0
        for refs in references_per_item:
            n_items += 1
            seen = set()
            for r in refs:
                words = as_words(r)
                for n in range(1, max_n + 1):
                    seen.update(ngrams(words, n))
            counts.update(seen)
        return cls(dict(counts), n_items)

    def idf(self, gram) -> float:
        return math.log(float(self.n_items)) - math.log(max(1.0, float(self.counts.get(gram, 0))))


def _tfidf(words, df: DocumentFrequency, max_n: int):
    vecs, norms = [], []
    for n in range(1, max_n + 1):
        vec = {g: c * df.idf(g) for g, c in ngrams(words, n).items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def cider_per_n(candidate, references, df: DocumentFrequency, max_n: int = MAX_N,
                sigma: float = CIDER_SIGMA) -> np.ndarray:
    """Per-order similarity (before the x10 scale), averaged over references."""
    cand = as_words(candidate)
    c_vecs, c_norms = _tfidf(cand, df, max_n)
    out = np.zeros(max_n)
    for ref in references:
        ref = as_words(ref)
        r_vecs, r_norms = _tfidf(ref, df, max_n)
        penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2 * sigma**2))
        for k in range(max_n):
            if c_norms[k] == 0 or r_norms[k] == 0:
                continue
            dot = sum(min(v, r_vecs[k].get(g, 0.0)) * r_vecs[k].get(g, 0.0)
                      for g, v in c_vecs[k].items())
            out[k] += penalty * dot / (c_norms[k] * r_norms[k])
    return out / len(references)


def cider_sentence(candidate, references, df: DocumentFrequency, max_n: int = MAX_N,
                   sigma: float = CIDER_SIGMA) -> float:
    if not references:
        raise ValueError("CIDEr needs at least one reference")
    return 10.0 * float(np.mean(cider_per_n(candidate, references, df, max_n, sigma)))


@dataclass
class CiderResult:
    scores: np.ndarray
    empty: list[int]

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores)) if len(self.scores) else 0.0


def cider_corpus(candidates, references_per_item, df: DocumentFrequency | None = None,
                 max_n: int = MAX_N, sigma: float = CIDER_SIGMA) -> CiderResult:
    """CIDEr-D for every item; document frequencies come from the given references."""
    references_per_item = [list(r) for r in references_per_item]
    if len(candidates) != len(references_per_item):
        raise ValueError("candidates and reference lists differ in length")
    for i, refs in enumerate(references_per_item):
        if not refs:
            raise ValueError(f"item {i} has no references")
    if df is None:
        df = DocumentFrequency.from_references(references_per_item, max_n)
    scores = np.zeros(len(candidates))
    empty = []
    for i, (cand, refs) in enumerate(zip(candidates, references_per_item)):
        if not as_words(cand):
            empty.append(i)
            continue
        scores[i] = cider_sentence(cand, refs, df, max_n, sigma)
    if empty:
        log.warning("%d empty candidate(s) scored 0: items %s", len(empty), empty[:10])
    return CiderResult(scores, empty)


# ---------------------------------------------------------------------------
# reward


@dataclass(frozen=True)
class RewardSpec:
    lambda_cider: float = 1.0
    lambda_bleu4: float = 1.0
    n_samples: int = 5

    def __post_init__(self):
        if self.lambda_cider < 0 or self.lambda_bleu4 < 0:
            raise ValueError("reward weights must be nonnegative")
        if self.lambda_cider == 0 and self.lambda_bleu4 == 0:
            raise ValueError("at least one reward weight must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")


def combined_reward(candidate, references, spec: RewardSpec, df: DocumentFrequency) -> float:
    if not references:
        raise ValueError("reward needs at least one reference")
    cand = as_words(candidate)
    if not cand:
        return 0.0
    r = 0.0
    if spec.lambda_cider:
        r += spec.lambda_cider * cider_sentence(cand, references, df)
    if spec.lambda_bleu4:
        r += spec.lambda_bleu4 * bleu4_sentence(cand, references)
    return r


def evaluate_captions(candidates, references_per_item) -> dict:
    """Evaluation summary with stable keys; METEOR and ROUGE-L are not computed."""
    bleu = corpus_bleu(candidates, references_per_item)
    cider = cider_corpus(candidates, references_per_item)
    out = {f"BLEU-{n}": bleu[n - 1] for n in range(1, MAX_N + 1)}
    out["METEOR"] = None
    out["ROUGE-L"] = None
    out["CIDEr"] = cider.mean
    return out
