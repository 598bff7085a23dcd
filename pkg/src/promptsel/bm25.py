"""Okapi BM25 candidate mining over an example bank.

Candidate sets feed relevance training: for each sample the top-F lexical
neighbours (excluding the sample itself) are mined here and then re-ranked by
the scorer. IDF uses the non-negative form ln((N - n + 0.5)/(n + 0.5) + 1).
"""

from __future__ import annotations

import math
import unicodedata
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .corpus import Example, ExampleBank
from .errors import EmptyBankError, ParameterError

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75


def _is_word_char(ch: str) -> bool:
    # letters, digits, and combining marks: re's \w drops marks, which would
    # split Indic-script words at every vowel sign
    return ch == "_" or unicodedata.category(ch)[0] in ("L", "N", "M")


def tokenize(text: str) -> list[str]:
    """Case-folded Unicode word tokens (runs of letters, digits, and marks)."""
    tokens: list[str] = []
    current: list[str] = []
    for ch in text.casefold():
        if _is_word_char(ch):
            current.append(ch)
        elif current:
            tokens.append("".join(current))
            current = []
    if current:
        tokens.append("".join(current))
    return tokens


@dataclass(frozen=True)
class InvertedIndex:
    """Term postings over the tokenized "input output" text of each example."""

    postings: dict[str, tuple[tuple[int, int], ...]]  # term -> ((doc, tf), ...)
    doc_lengths: tuple[int, ...]
    avg_doc_length: float
    doc_count: int
    id_to_index: dict[str, int]
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B

    def idf(self, term: str) -> float:
        n = len(self.postings.get(term, ()))
        return math.log((self.doc_count - n + 0.5) / (n + 0.5) + 1.0)


@dataclass(frozen=True)
class CandidateSet:
    """Top-F mined candidates for one sample, scores non-increasing."""

    owner: str
    candidates: tuple[tuple[int, float], ...]  # (example index, bm25 score)
    capacity: int

    def __post_init__(self):
        if len(self.candidates) > self.capacity:
            raise ParameterError(
                f"candidate set for {self.owner!r} exceeds capacity {self.capacity}"
            )
        scores = [s for _, s in self.candidates]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ParameterError(f"candidate scores for {self.owner!r} are not sorted")

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.candidates)

    def __len__(self) -> int:
        return len(self.candidates)


def build_index(bank: ExampleBank, k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> InvertedIndex:
    """Index a bank for BM25 mining; immutable once built."""
    if len(bank) == 0:
        raise EmptyBankError(f"cannot index empty bank {bank.language!r}")
    postings: dict[str, list[tuple[int, int]]] = {}
    lengths: list[int] = []
    for doc_id, ex in enumerate(bank.examples):
        tokens = tokenize(ex.pair_text())
        lengths.append(len(tokens))
        for term, tf in sorted(Counter(tokens).items()):
            postings.setdefault(term, []).append((doc_id, tf))
    return InvertedIndex(
        postings={t: tuple(p) for t, p in postings.items()},
        doc_lengths=tuple(lengths),
        avg_doc_length=sum(lengths) / len(lengths),
        doc_count=len(bank),
        id_to_index={ex.id: i for i, ex in enumerate(bank.examples)},
        k1=k1,
        b=b,
    )


def bm25_score(index: InvertedIndex, query_tokens: list[str], doc_id: int) -> float:
    """Okapi BM25 of one document against a query token multiset."""
    k1, b = index.k1, index.b
    dl = index.doc_lengths[doc_id]
    norm = k1 * (1.0 - b + b * dl / index.avg_doc_length)
    score = 0.0
    for term, qtf in Counter(query_tokens).items():
        for d, tf in index.postings.get(term, ()):
            if d == doc_id:
                score += qtf * index.idf(term) * tf * (k1 + 1.0) / (tf + norm)
                break
    return score


def mine_candidates(index: InvertedIndex, sample: Example, capacity: int) -> CandidateSet:
    """Top-``capacity`` examples by BM25 against the sample's pair text.

    The sample itself is excluded when it belongs to the indexed bank.
    Documents sharing no term with the query score 0 and are dropped; ties
    break toward the lower example index.
    """
    if capacity < 1:
        raise ParameterError(f"candidate capacity must be >= 1, got {capacity}")
    query_tokens = tokenize(sample.pair_text())
    k1, b = index.k1, index.b
    scores: dict[int, float] = {}
    for term, qtf in Counter(query_tokens).items():
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for doc_id, tf in plist:
            dl = index.doc_lengths[doc_id]
            norm = k1 * (1.0 - b + b * dl / index.avg_doc_length)
            scores[doc_id] = scores.get(doc_id, 0.0) + qtf * idf * tf * (k1 + 1.0) / (tf + norm)
    own = index.id_to_index.get(sample.id)
    ranked = sorted(
        ((i, s) for i, s in scores.items() if s > 0.0 and i != own),
        key=lambda item: (-item[1], item[0]),
    )
    return CandidateSet(owner=sample.id, candidates=tuple(ranked[:capacity]), capacity=capacity)


def mine_candidates_by_embedding(
    bank: ExampleBank,
    query_vector: np.ndarray,
    capacity: int,
    exclude_index: int | None = None,
    owner: str = "",
) -> CandidateSet:
    """Rank candidates by base-embedding cosine instead of BM25.

    Fallback mining route for the ``--candidates-by-embedding`` mode; the
    returned scores are cosines rather than BM25 values.
    """
    if capacity < 1:
        raise ParameterError(f"candidate capacity must be >= 1, got {capacity}")
    rows = bank.require_embeddings()
    q = np.asarray(query_vector, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1) * np.linalg.norm(q)
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = np.where(norms > 0.0, rows @ q / norms, -np.inf)
    order = np.lexsort((np.arange(len(rows)), -sims))
    out: list[tuple[int, float]] = []
    for i in order:
        if exclude_index is not None and int(i) == exclude_index:
            continue
        if not np.isfinite(sims[i]):
            continue
        out.append((int(i), float(sims[i])))
        if len(out) == capacity:
            break
    return CandidateSet(owner=owner, candidates=tuple(out), capacity=capacity)
