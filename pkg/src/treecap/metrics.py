"""Self-contained caption metrics: CIDEr-D (training reward) and corpus BLEU.

Candidates and references are lists of already-tokenized sentences (use
lexicon.word_tokens so both sides share one normalization). CIDEr-D follows
the standard definition: clipped TF-IDF n-gram cosine per n = 1..4, gaussian
length penalty with sigma = 6, averaged over references and n, scaled by 10.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

Tokens = Sequence[str]


class MetricError(ValueError):
    pass


def ngram_counts(tokens: Tokens, max_n: int = 4) -> dict[int, Counter]:
    """Per-order n-gram counts for n = 1..max_n."""
    out = {}
    for n in range(1, max_n + 1):
        out[n] = Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))
    return out


@dataclass
class IdfTable:
    """Document frequencies over a reference corpus; one count per image."""

    df: dict[tuple, int]
    n_images: int
    max_n: int = 4

    def idf(self, ngram: tuple) -> float:
        return math.log(self.n_images / max(1.0, self.df.get(ngram, 0)))


def build_idf(references_per_image: Sequence[Sequence[Tokens]],
              max_n: int = 4) -> IdfTable:
    """Count, for each n-gram, the number of images whose references contain it."""
    if len(references_per_image) == 0:
        raise MetricError("empty reference corpus")
    df: Counter = Counter()
    for refs in references_per_image:
        if len(refs) == 0:
            raise MetricError("image with no references")
        seen = set()
        for ref in refs:
            for counts in ngram_counts(ref, max_n).values():
                seen.update(counts)
        df.update(seen)
    return IdfTable(df=dict(df), n_images=len(references_per_image), max_n=max_n)


def _tfidf_vec(tokens: Tokens, idf: IdfTable, max_n: int):
    """Per-order {ngram: tf*idf} maps and their euclidean norms."""
    vecs, norms = {}, {}
    for n, counts in ngram_counts(tokens, max_n).items():
        vec = {ng: c * idf.idf(ng) for ng, c in counts.items()}
        vecs[n] = vec
        norms[n] = math.sqrt(sum(v * v for v in vec.values()))
    return vecs, norms


def cider_d(candidate: Tokens, references: Sequence[Tokens], idf: IdfTable,
            max_n: int = 4, sigma: float = 6.0) -> float:
    """CIDEr-D score of one candidate against its references, in [0, 10]."""
    if len(references) == 0:
        raise MetricError("cider_d needs at least one reference")
    cand_vecs, cand_norms = _tfidf_vec(candidate, idf, max_n)
    total = 0.0
    for ref in references:
        ref_vecs, ref_norms = _tfidf_vec(ref, idf, max_n)
        penalty = math.exp(-((len(candidate) - len(ref)) ** 2) / (2.0 * sigma ** 2))
        for n in range(1, max_n + 1):
            num = sum(min(v, ref_vecs[n].get(ng, 0.0)) * ref_vecs[n].get(ng, 0.0)
                      for ng, v in cand_vecs[n].items())
            denom = cand_norms[n] * ref_norms[n]
            if denom > 0:
                total += penalty * num / denom
    return 10.0 * total / (max_n * len(references))


def corpus_cider_d(candidates: Sequence[Tokens],
                   references_per_image: Sequence[Sequence[Tokens]],
                   idf: IdfTable | None = None,
                   max_n: int = 4, sigma: float = 6.0) -> tuple[float, list[float]]:
    """Mean CIDEr-D plus per-image scores; builds the IDF table if not given."""
    if len(candidates) != len(references_per_image):
        raise MetricError("candidate/reference count mismatch")
    if idf is None:
        idf = build_idf(references_per_image, max_n)
    scores = [cider_d(c, r, idf, max_n, sigma)
              for c, r in zip(candidates, references_per_image)]
    return sum(scores) / len(scores), scores


def bleu(candidates: Sequence[Tokens],
         references_per_image: Sequence[Sequence[Tokens]],
         max_n: int = 4) -> float:
    """Corpus-level BLEU: clipped n-gram precisions, geometric mean, brevity penalty."""
    if len(candidates) == 0:
        raise MetricError("empty candidate corpus")
    if len(candidates) != len(references_per_image):
        raise MetricError("candidate/reference count mismatch")

    matched = [0] * (max_n + 1)
    attempted = [0] * (max_n + 1)
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references_per_image):
        if len(refs) == 0:
            raise MetricError("image with no references")
        cand_len += len(cand)
        # closest reference length; ties broken toward the shorter reference
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            c_counts = ngram_counts(cand, n)[n]
            max_ref = Counter()
            for r in refs:
                for ng, c in ngram_counts(r, n)[n].items():
                    max_ref[ng] = max(max_ref[ng], c)
            attempted[n] += sum(c_counts.values())
            matched[n] += sum(min(c, max_ref[ng]) for ng, c in c_counts.items())

    log_sum = 0.0
    for n in range(1, max_n + 1):
        if attempted[n] == 0 or matched[n] == 0:
            return 0.0
        log_sum += math.log(matched[n] / attempted[n])
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / max(1, cand_len))
    return bp * math.exp(log_sum / max_n)
