"""Auxiliary bank selection and the alternating specialize/merge loop.

Auxiliary selection keeps the candidate banks whose mean-embedding cosine to
the target bank reaches the delta-th percentile of all candidate
similarities (inclusive, linear-interpolation percentile; the target itself
is not part of the pool).

Training alternates, for a fixed number of outer iterations: (Specialize)
fine-tune one retriever per bank with the relevance loss, warm-started from
the current merged parameters; (Merge) average the projections entrywise;
then score the merged retriever on held-out validation data. The checkpoint
with the best validation score wins (earliest iteration on ties).

Validation metric: mean reciprocal rank of each validation sample's
scorer-best candidate within the retriever's similarity ranking of that
sample's mined candidates. It is a retrieval-side proxy for downstream
accuracy, monotone in the same ranking quality the loss optimizes; an
optional generation-based route exists in the CLI for runs with a live
generation backend.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import bm25
from .corpus import BankCollection, ExampleBank, bank_mean_embedding, cosine_similarity
from .errors import EmptyBankError, ParameterError, ShapeError
from .retriever import (
    RelevanceSample,
    RetrieverParams,
    embed,
    embed_rows,
    identity_params,
    train_relevance,
)
from .scorer import Scorer, ScoredCandidate, best_candidate, build_score_request


@dataclass(frozen=True)
class AuxSelection:
    """Outcome of auxiliary bank selection at one percentile threshold."""

    similarities: dict[str, float]  # language -> cosine to the target mean
    threshold: float
    selected: tuple[str, ...]


def select_auxiliary(
    target: ExampleBank, candidates: Sequence[ExampleBank], delta: float
) -> AuxSelection:
    """Keep candidates whose mean-embedding cosine reaches the percentile cut."""
    if not candidates:
        raise ParameterError("auxiliary selection needs at least one candidate bank")
    if not 0.0 <= delta <= 100.0:
        raise ParameterError(f"delta must lie in [0, 100], got {delta}")
    languages = [bank.language for bank in candidates]
    if len(set(languages)) != len(languages):
        raise ParameterError("candidate banks must have distinct language tags")
    target_mean = bank_mean_embedding(target)
    sims = {
        bank.language: cosine_similarity(bank_mean_embedding(bank), target_mean)
        for bank in candidates
    }
    threshold = float(np.percentile(list(sims.values()), delta))
    selected = tuple(bank.language for bank in candidates if sims[bank.language] >= threshold)
    return AuxSelection(similarities=sims, threshold=threshold, selected=selected)


def merge_params(phis: Sequence[RetrieverParams]) -> RetrieverParams:
    """Entrywise arithmetic mean of the projection matrices."""
    if not phis:
        raise ParameterError("cannot merge zero parameter sets")
    dims = {p.dim for p in phis}
    if len(dims) > 1:
        raise ShapeError(f"cannot merge projections of different dimensions {sorted(dims)}")
    stacked = np.stack([p.projection for p in phis], axis=0)
    return RetrieverParams(
        projection=np.mean(stacked, axis=0),
        version=max(p.version for p in phis),
    )


@dataclass(frozen=True)
class ValidationLabels:
    """Scorer-labeled candidates for validation samples, fixed per run."""

    samples: tuple[RelevanceSample, ...]


def label_validation(
    validation: ExampleBank, source: ExampleBank, scorer: Scorer, config
) -> ValidationLabels:
    """Mine each validation sample's candidates from ``source`` and label them."""
    if len(validation) == 0:
        raise EmptyBankError("validation bank is empty")
    source_rows = source.require_embeddings()
    index = None
    if not config.candidates_by_embedding:
        index = bm25.build_index(source, k1=config.bm25_k1, b=config.bm25_b)
    labeled: list[RelevanceSample] = []
    for i, ex in enumerate(validation.examples):
        if config.candidates_by_embedding:
            cand = bm25.mine_candidates_by_embedding(
                source, validation.require_embeddings()[i], config.candidates, owner=ex.id
            )
        else:
            cand = bm25.mine_candidates(index, ex, config.candidates)
        if len(cand) == 0:
            continue
        requests_ = [
            build_score_request(source.examples[j], ex.input_text, ex.output_text)
            for j in cand.indices
        ]
        logprobs = scorer.score_many(requests_)
        scored = [ScoredCandidate(pos, lp) for pos, lp in enumerate(logprobs)]
        labeled.append(
            RelevanceSample(
                sample_index=i,
                candidate_indices=cand.indices,
                positive=best_candidate(scored),
                query_base=validation.query_row(i),
                candidate_bases=source_rows[list(cand.indices)],
            )
        )
    if not labeled:
        raise EmptyBankError("no validation sample produced a candidate set")
    return ValidationLabels(samples=tuple(labeled))


def validate(params: RetrieverParams, labels: ValidationLabels) -> float:
    """Mean reciprocal rank of the labeled positives under ``params``.

    A positive's rank counts candidates with strictly greater similarity plus
    equal-similarity candidates at lower indices, so the metric is
    deterministic under ties.
    """
    if not labels.samples:
        raise EmptyBankError("validation labels are empty")
    total = 0.0
    for sample in labels.samples:
        u = embed(params, sample.query_base)
        sims = embed_rows(params, sample.candidate_bases) @ u
        s_pos = sims[sample.positive]
        rank = 1 + int(np.sum(sims > s_pos))
        rank += int(np.sum(sims[: sample.positive] == s_pos))
        total += 1.0 / rank
    return total / len(labels.samples)


def derive_rng(seed: int, iteration: int, bank_index: int) -> np.random.Generator:
    """Independent stream per (outer iteration, bank slot), fully reproducible."""
    return np.random.default_rng([seed, iteration, bank_index])


@dataclass
class TrainState:
    """Bookkeeping of one alternating-minimization run."""

    iterations_run: int = 0
    bank_params: list[RetrieverParams] = field(default_factory=list)
    merged: RetrieverParams | None = None
    trace: list[float] = field(default_factory=list)
    best_params: RetrieverParams | None = None
    best_score: float = -np.inf
    best_iteration: int = 0
    checkpoints: list[RetrieverParams] = field(default_factory=list)

    def record(self, merged: RetrieverParams, score: float) -> None:
        self.iterations_run += 1
        self.merged = merged
        self.trace.append(score)
        self.checkpoints.append(merged)
        if score > self.best_score:
            self.best_score = score
            self.best_params = merged
            self.best_iteration = self.iterations_run


def run_alternating_minimization(
    banks: BankCollection,
    scorer: Scorer,
    config,
    labels: ValidationLabels | None = None,
    validator=None,
) -> TrainState:
    """Specialize/Merge for ``config.iterations`` rounds with validation tracking.

    Iteration 1 specializes every bank from the identity initialization;
    later iterations warm-start from the previous merged parameters. Bank
    labels are re-mined and re-scored each outer iteration; validation labels
    are fixed once for the whole run. The best checkpoint by validation score
    is kept (earliest iteration wins ties). A custom ``validator`` callable
    (params -> score) replaces the MRR metric when given, e.g. for
    generation-based validation against a live backend.
    """
    training_banks = banks.all_training_banks
    if validator is None:
        if labels is None:
            labels = label_validation(banks.validation, banks.target, scorer, config)
        fixed_labels = labels
        validator = lambda params: validate(params, fixed_labels)  # noqa: E731
    state = TrainState()
    rho = identity_params(banks.target.dim)
    for iteration in range(1, config.iterations + 1):
        phis = []
        for bank_index, bank in enumerate(training_banks):
            rng = derive_rng(config.seed, iteration, bank_index)
            phis.append(train_relevance(bank, scorer, config, rng, init=rho))
        state.bank_params = phis
        rho = merge_params(phis)
        state.record(rho, validator(rho))
    return state
