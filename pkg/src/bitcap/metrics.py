"""Corpus-level caption metrics: CIDEr-D (reward + headline) and BLEU@1-4.

CIDEr-D follows the consensus-metric recipe used by the COCO evaluation
tooling: per-order TF-IDF vectors with document frequencies counted over
per-sample unioned n-gram sets, count clipping against the reference,
a Gaussian length penalty exp(-(lc-lr)^2 / (2*sigma^2)), the mean over
orders 1..4, scaled by 10.  The plain (unclipped, unpenalized) variant is
selectable for study.

Candidates and references are token sequences; tokenization is plain
whitespace upstream.  Everything here is pure and deterministic, and a
built corpus is immutable, so scoring may run concurrently.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Sequence

Token = Hashable
Sentence = Sequence[Token]


def _ngram_counts(tokens: Sentence, n_max: int) -> list[Counter]:
    """Counters of 1..n_max grams, index 0 holding unigrams."""
    out = []
    for n in range(1, n_max + 1):
        out.append(Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)))
    return out


@dataclass(frozen=True)
class RefCorpus:
    """Reference sentences plus the n-gram document-frequency table."""

    refs: dict[Hashable, list[tuple]]
    doc_freq: dict[tuple, int] = field(repr=False)
    size: int = 0
    n_max: int = 4
    sigma: float = 6.0

    @property
    def log_size(self) -> float:
        return math.log(self.size)


def build_ref_corpus(
    references: dict[Hashable, Sequence[Sentence]], n_max: int = 4, sigma: float = 6.0
) -> RefCorpus:
    """Count document frequencies over each sample's unioned n-gram set."""
    if not references:
        raise ValueError("reference corpus is empty")
    refs = {}
    doc_freq: dict[tuple, int] = {}
    for sid, ref_list in references.items():
        if not ref_list:
            raise ValueError(f"sample {sid!r} has no references")
        refs[sid] = [tuple(r) for r in ref_list]
        seen = set()
        for ref in refs[sid]:
            for counts in _ngram_counts(ref, n_max):
                seen.update(counts)
        for gram in seen:
            doc_freq[gram] = doc_freq.get(gram, 0) + 1
    return RefCorpus(refs=refs, doc_freq=doc_freq, size=len(refs), n_max=n_max, sigma=sigma)


def _tfidf_vectors(tokens: Sentence, corpus: RefCorpus):
    """Per-order raw-count TF-IDF maps and their L2 norms."""
    vecs = []
    norms = []
    for counts in _ngram_counts(tokens, corpus.n_max):
        vec = {}
        sq = 0.0
        for gram, count in counts.items():
            idf = corpus.log_size - math.log(max(1.0, corpus.doc_freq.get(gram, 0)))
            w = count * idf
            vec[gram] = w
            sq += w * w
        vecs.append(vec)
        norms.append(math.sqrt(sq))
    return vecs, norms


def cider_d(
    candidate: Sentence,
    sample_id: Hashable,
    corpus: RefCorpus,
    variant: str = "cider-d",
) -> float:
    """Consensus score of one candidate against one sample's references."""
    if sample_id not in corpus.refs:
        raise KeyError(f"unknown sample id {sample_id!r}")
    if variant not in ("cider-d", "cider"):
        raise ValueError(f"unknown variant {variant!r}")
    clip = variant == "cider-d"
    cand = tuple(candidate)
    cand_vecs, cand_norms = _tfidf_vectors(cand, corpus)
    total = 0.0
    refs = corpus.refs[sample_id]
    for ref in refs:
        ref_vecs, ref_norms = _tfidf_vectors(ref, corpus)
        if clip:
            penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2.0 * corpus.sigma**2))
        else:
            penalty = 1.0
        for n in range(corpus.n_max):
            if cand_norms[n] == 0.0 or ref_norms[n] == 0.0:
                continue
            rv = ref_vecs[n]
            num = 0.0
            for gram, w in cand_vecs[n].items():
                r = rv.get(gram, 0.0)
                num += (min(w, r) if clip else w) * r
            total += penalty * num / (cand_norms[n] * ref_norms[n])
    return 10.0 * total / (corpus.n_max * len(refs))


def corpus_cider(
    candidates: dict[Hashable, Sentence], corpus: RefCorpus, variant: str = "cider-d"
) -> float:
    """Mean per-sample score over all candidates."""
    if not candidates:
        raise ValueError("no candidates to score")
    return sum(cider_d(c, sid, corpus, variant) for sid, c in candidates.items()) / len(candidates)


def bleu(
    candidates: Sequence[Sentence],
    references: Sequence[Sequence[Sentence]],
    n_max: int = 4,
) -> list[float]:
    """Corpus BLEU@1..n_max with modified precision and brevity penalty.

    The effective reference length per candidate is the closest reference
    length, ties resolved toward the shorter reference.
    """
    if not candidates or len(candidates) != len(references):
        raise ValueError("need matching nonempty candidate and reference lists")
    clipped = [0] * n_max
    totals = [0] * n_max
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        cand = tuple(cand)
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        cand_counts = _ngram_counts(cand, n_max)
        ref_counts = [_ngram_counts(tuple(r), n_max) for r in refs]
        for n in range(n_max):
            ceiling = Counter()
            for rc in ref_counts:
                for gram, c in rc[n].items():
                    if c > ceiling[gram]:
                        ceiling[gram] = c
            totals[n] += sum(cand_counts[n].values())
            clipped[n] += sum(min(c, ceiling[gram]) for gram, c in cand_counts[n].items())
    if cand_len == 0:
        return [0.0] * n_max
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    precisions = [clipped[n] / totals[n] if totals[n] > 0 else 0.0 for n in range(n_max)]
    scores = []
    for k in range(1, n_max + 1):
        head = precisions[:k]
        if any(p == 0.0 for p in head):
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(math.log(p) for p in head) / k))
    return scores
