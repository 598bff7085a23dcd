"""Shared fixtures and bank-building helpers."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from promptsel.corpus import Example, ExampleBank


def make_bank(
    language: str,
    texts: list[tuple[str, str]],
    embeddings: np.ndarray | None = None,
    query_embeddings: np.ndarray | None = None,
    id_prefix: str | None = None,
) -> ExampleBank:
    """Build a bank in memory from (input, output) pairs."""
    prefix = id_prefix if id_prefix is not None else f"{language}-"
    examples = tuple(
        Example(id=f"{prefix}{i:03d}", input_text=inp, output_text=out, language=language)
        for i, (inp, out) in enumerate(texts)
    )
    return ExampleBank(
        language=language,
        examples=examples,
        base_embeddings=None if embeddings is None else np.asarray(embeddings, dtype=np.float64),
        query_embeddings=None
        if query_embeddings is None
        else np.asarray(query_embeddings, dtype=np.float64),
    )


def random_bank(
    rng: np.random.Generator,
    language: str,
    size: int,
    dim: int,
    vocab: list[str] | None = None,
) -> ExampleBank:
    """Bank with random embeddings and small-vocabulary random texts."""
    vocab = vocab or [f"w{j}" for j in range(12)]
    texts = []
    for i in range(size):
        words = rng.choice(vocab, size=4, replace=True)
        texts.append((f"{language} {' '.join(words)} n{i:03d}", f"out {vocab[i % len(vocab)]}"))
    return make_bank(language, texts, embeddings=rng.standard_normal((size, dim)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
