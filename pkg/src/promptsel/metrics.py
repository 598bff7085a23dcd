"""Generation-quality metrics: character F1 (chrF1) and bag-of-tokens F1.

chrF1 counts character n-gram overlap for orders 1..6 on whitespace-stripped
text, averages precision and recall over the orders where both sides have
n-grams, and combines them with beta = 1; scores live in [0, 100]. Token-F1
is the SQuAD-style bag-of-tokens F1 over case-folded, punctuation-stripped,
whitespace-split tokens, in [0, 1]. Token-level n-gram metrics (BLEU, ROUGE)
are deliberately out of scope here.
"""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .errors import ParameterError

CHRF_MAX_ORDER = 6
CHRF_BETA = 1.0

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def _char_ngrams(text: str, n: int) -> Counter:
    return Counter(text[i : i + n] for i in range(len(text) - n + 1))


def chrf1(hypothesis: str, reference: str) -> float:
    """Character n-gram F1 in [0, 100]; identical non-empty strings score 100."""
    hyp = "".join(hypothesis.split())
    ref = "".join(reference.split())
    precision_sum = 0.0
    recall_sum = 0.0
    effective_orders = 0
    for n in range(1, CHRF_MAX_ORDER + 1):
        hyp_ngrams = _char_ngrams(hyp, n)
        ref_ngrams = _char_ngrams(ref, n)
        hyp_total = sum(hyp_ngrams.values())
        ref_total = sum(ref_ngrams.values())
        if hyp_total == 0 or ref_total == 0:
            continue
        common = sum((hyp_ngrams & ref_ngrams).values())
        precision_sum += common / hyp_total
        recall_sum += common / ref_total
        effective_orders += 1
    if effective_orders == 0:
        return 0.0
    precision = precision_sum / effective_orders
    recall = recall_sum / effective_orders
    if precision + recall == 0.0:
        return 0.0
    beta_sq = CHRF_BETA * CHRF_BETA
    return 100.0 * (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall)


def _normalize_tokens(text: str) -> list[str]:
    return text.casefold().translate(_PUNCT_TABLE).split()


def token_f1(hypothesis: str, reference: str) -> float:
    """Bag-of-tokens F1 in [0, 1].

    Both sides empty (after normalization) scores 1.0 by convention; exactly
    one side empty scores 0.0.
    """
    hyp = _normalize_tokens(hypothesis)
    ref = _normalize_tokens(reference)
    if not hyp and not ref:
        return 1.0
    if not hyp or not ref:
        return 0.0
    common = sum((Counter(hyp) & Counter(ref)).values())
    if common == 0:
        return 0.0
    precision = common / len(hyp)
    recall = common / len(ref)
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class EvalRecord:
    """One scored hypothesis/reference pair."""

    query_id: str
    hypothesis: str
    reference: str

    def scores(self) -> dict[str, float]:
        return {
            "chrf1": chrf1(self.hypothesis, self.reference),
            "token_f1": token_f1(self.hypothesis, self.reference),
        }


PRIMARY_METRIC = {
    "translation": "chrf1",
    "summarization": "chrf1",
    "xorqa": "token_f1",
    "xquad": "token_f1",
}


def evaluate_run(records: Sequence[EvalRecord], task: str) -> dict:
    """Per-metric arithmetic means over all records."""
    if not records:
        raise ParameterError("cannot evaluate zero records")
    sums: dict[str, float] = {"chrf1": 0.0, "token_f1": 0.0}
    for rec in records:
        for name, value in rec.scores().items():
            sums[name] += value
    count = len(records)
    summary = {name: total / count for name, total in sums.items()}
    return {
        "task": task,
        "count": count,
        "means": summary,
        "primary_metric": PRIMARY_METRIC.get(task, "chrf1"),
    }
