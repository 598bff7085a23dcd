"""The trainable retriever: a projection over frozen base embeddings.

The embedding map is ``v -> normalize(W v)`` with a square matrix ``W``; the
identity matrix reproduces the base embedding space, so training starts
there. Relevance training aligns the retriever's ranking with the scorer's:
for each sample, BM25 mines a candidate pool, the scorer labels the best
candidate, and the softmax negative log-likelihood

    loss = -log( exp(sim(x, best)) / sum_a exp(sim(x, a)) )

is minimized over W, where sim is the dot product of the unit embeddings.
The gradient is computed analytically, including the normalization Jacobian
(for ``s = cos(Wx, Wc)``: ``ds/d(Wx) = (e_c - s e_x)/||Wx||`` and
symmetrically for ``Wc``), and checked against central finite differences in
the test suite.

Checkpoint format: magic ``RTV1``, u64 dimension d, d*d little-endian
float32 values row-major, then a u64 version tag.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bm25
from .corpus import ExampleBank
from .errors import (
    DataError,
    DegenerateVectorError,
    EmptyBankError,
    ParameterError,
    ParseError,
    ShapeError,
)
from .scorer import Scorer, ScoredCandidate, best_candidate, build_score_request

CHECKPOINT_MAGIC = b"RTV1"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class RetrieverParams:
    """Square projection applied to base embeddings before normalization."""

    projection: np.ndarray
    version: int = 0

    def __post_init__(self):
        W = np.asarray(self.projection, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ShapeError(f"projection must be square, got shape {W.shape}")
        if not np.all(np.isfinite(W)):
            raise DataError("projection contains non-finite entries")
        object.__setattr__(self, "projection", W)

    @property
    def dim(self) -> int:
        return self.projection.shape[0]


def identity_params(dim: int) -> RetrieverParams:
    return RetrieverParams(projection=np.eye(dim), version=0)


def embed(params: RetrieverParams, base: np.ndarray) -> np.ndarray:
    """Unit-normalized projection of one base vector."""
    z = params.projection @ np.asarray(base, dtype=np.float64)
    norm = float(np.linalg.norm(z))
    if norm < _NORM_FLOOR:
        raise DegenerateVectorError(f"projected vector has norm {norm:.3e}")
    return z / norm


def embed_rows(params: RetrieverParams, bases: np.ndarray) -> np.ndarray:
    """Row-wise ``embed`` over a (n, d) matrix."""
    Z = np.asarray(bases, dtype=np.float64) @ params.projection.T
    norms = np.linalg.norm(Z, axis=1)
    if np.any(norms < _NORM_FLOOR):
        bad = int(np.argmin(norms))
        raise DegenerateVectorError(f"projected row {bad} has norm {norms[bad]:.3e}")
    return Z / norms[:, None]


@dataclass(frozen=True)
class RelevanceSample:
    """One labeled training instance: a query, its candidates, the positive."""

    sample_index: int
    candidate_indices: tuple[int, ...]
    positive: int  # position within candidate_indices
    query_base: np.ndarray
    candidate_bases: np.ndarray

    def __post_init__(self):
        if not self.candidate_indices:
            raise ParameterError(f"sample {self.sample_index}: empty candidate set")
        if not 0 <= self.positive < len(self.candidate_indices):
            raise ParameterError(
                f"sample {self.sample_index}: positive {self.positive} outside the candidate set"
            )


RelevanceBatch = Sequence[RelevanceSample]


def _sample_scores(params: RetrieverParams, sample: RelevanceSample):
    q = params.projection @ sample.query_base
    nq = float(np.linalg.norm(q))
    if nq < _NORM_FLOOR:
        raise DegenerateVectorError("projected query has near-zero norm")
    u = q / nq
    Zc = sample.candidate_bases @ params.projection.T
    nz = np.linalg.norm(Zc, axis=1)
    if np.any(nz < _NORM_FLOOR):
        raise DegenerateVectorError("a projected candidate has near-zero norm")
    E = Zc / nz[:, None]
    s = E @ u
    return q, nq, u, E, nz, s


def relevance_loss(params: RetrieverParams, batch: RelevanceBatch) -> float:
    """Mean softmax NLL of the positive candidates under ``params``."""
    if not batch:
        raise ParameterError("relevance batch must be non-empty")
    total = 0.0
    for sample in batch:
        _, _, _, _, _, s = _sample_scores(params, sample)
        m = float(np.max(s))
        lse = m + float(np.log(np.sum(np.exp(s - m))))
        total += lse - float(s[sample.positive])
    return total / len(batch)


def relevance_grad(params: RetrieverParams, batch: RelevanceBatch) -> np.ndarray:
    """Analytic d(loss)/dW for ``relevance_loss`` over the same batch."""
    if not batch:
        raise ParameterError("relevance batch must be non-empty")
    G = np.zeros_like(params.projection)
    for sample in batch:
        _, nq, u, E, nz, s = _sample_scores(params, sample)
        m = float(np.max(s))
        p = np.exp(s - m)
        p /= p.sum()
        w = p.copy()
        w[sample.positive] -= 1.0
        gq = (E.T @ w - float(w @ s) * u) / nq
        G += np.outer(gq, sample.query_base)
        gc = (w[:, None] * (u[None, :] - s[:, None] * E)) / nz[:, None]
        G += gc.T @ sample.candidate_bases
    return G / len(batch)


def label_bank(
    bank: ExampleBank,
    scorer: Scorer,
    config,
    index: bm25.InvertedIndex | None = None,
) -> list[RelevanceSample]:
    """Mine candidates and let the scorer pick each sample's positive.

    Samples whose candidate pool comes back empty (no lexical overlap with
    the rest of the bank) are skipped. Labels depend only on the bank and the
    scorer, never on the retriever, except in the embedding-mining mode.
    """
    if len(bank) == 0:
        raise EmptyBankError(f"cannot label empty bank {bank.language!r}")
    rows = bank.require_embeddings()
    if index is None and not config.candidates_by_embedding:
        index = bm25.build_index(bank, k1=config.bm25_k1, b=config.bm25_b)
    labeled: list[RelevanceSample] = []
    for i, ex in enumerate(bank.examples):
        if config.candidates_by_embedding:
            cand = bm25.mine_candidates_by_embedding(
                bank, rows[i], config.candidates, exclude_index=i, owner=ex.id
            )
        else:
            cand = bm25.mine_candidates(index, ex, config.candidates)
        if len(cand) == 0:
            continue
        requests_ = [
            build_score_request(bank.examples[j], ex.input_text, ex.output_text)
            for j in cand.indices
        ]
        logprobs = scorer.score_many(requests_)
        scored = [ScoredCandidate(pos, lp) for pos, lp in enumerate(logprobs)]
        labeled.append(
            RelevanceSample(
                sample_index=i,
                candidate_indices=cand.indices,
                positive=best_candidate(scored),
                query_base=bank.query_row(i),
                candidate_bases=rows[list(cand.indices)],
            )
        )
    return labeled


@dataclass
class _AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, W: np.ndarray) -> "_AdamState":
        return cls(m=np.zeros_like(W), v=np.zeros_like(W))

    def step(self, W: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = ADAM_BETA1 * self.m + (1.0 - ADAM_BETA1) * grad
        self.v = ADAM_BETA2 * self.v + (1.0 - ADAM_BETA2) * grad * grad
        m_hat = self.m / (1.0 - ADAM_BETA1 ** self.t)
        v_hat = self.v / (1.0 - ADAM_BETA2 ** self.t)
        return W - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def train_relevance(
    bank: ExampleBank,
    scorer: Scorer,
    config,
    rng: np.random.Generator,
    init: RetrieverParams | None = None,
    labels: list[RelevanceSample] | None = None,
) -> RetrieverParams:
    """Minimize the relevance loss on one bank with minibatch Adam.

    Labels are computed once per call (one outer iteration) and reused for
    every epoch. Training starts from ``init`` when given, otherwise from the
    identity.
    """
    if len(bank) == 0:
        raise EmptyBankError(f"cannot train on empty bank {bank.language!r}")
    if labels is None:
        labels = label_bank(bank, scorer, config)
    if not labels:
        raise EmptyBankError(
            f"bank {bank.language!r} produced no labeled samples (no candidate overlap)"
        )
    params = init if init is not None else identity_params(bank.dim)
    W = params.projection.copy()
    adam = _AdamState.like(W)
    n = len(labels)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            chunk = [labels[j] for j in order[start : start + config.batch_size]]
            grad = relevance_grad(RetrieverParams(W, params.version), chunk)
            W = adam.step(W, grad, config.learning_rate)
    return RetrieverParams(projection=W, version=params.version + 1)


def save_params(params: RetrieverParams, path: str | Path) -> None:
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", params.dim))
        fh.write(np.ascontiguousarray(params.projection, dtype="<f4").tobytes())
        fh.write(struct.pack("<Q", params.version))


def load_params(path: str | Path) -> RetrieverParams:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not an RTV1 checkpoint")
    (dim,) = struct.unpack_from("<Q", raw, 4)
    expected = 12 + dim * dim * 4 + 8
    if len(raw) != expected:
        raise ParseError(f"{path}: file is {len(raw)} bytes, header implies {expected}")
    W = np.frombuffer(raw, dtype="<f4", offset=12, count=dim * dim).reshape(dim, dim)
    (version,) = struct.unpack_from("<Q", raw, 12 + dim * dim * 4)
    return RetrieverParams(projection=W.astype(np.float64), version=int(version))
