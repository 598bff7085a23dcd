"""Example banks: the (input, output) pairs demonstrations are drawn from.

File formats
------------
Bank file: UTF-8 JSONL, one object per line::

    {"id": "e1", "input": "...", "output": "...", "lang": "mni"}

Embedding file: little-endian binary. Header is the magic bytes ``EMB1``
followed by two unsigned 64-bit integers (rows, dim), then ``rows * dim``
IEEE-754 32-bit floats in row-major order.

Embeddings are produced outside this package by any sentence encoder and
consumed as-is; the embedding dimension is read from the file header. Rows
attached in the default ``bank`` role are expected to encode the
concatenation "input output" of each example, because banks are scored and
mined as (input, output) pairs. Rows attached in the ``query`` role encode
the input alone and are used wherever an example acts as a query; when no
query-role matrix is attached, the bank-role rows stand in for both.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DataError,
    DegenerateVectorError,
    EmptyBankError,
    ParseError,
    ShapeError,
    ValidationError,
)

EMBEDDING_MAGIC = b"EMB1"


@dataclass(frozen=True)
class Example:
    """One (input, output) text pair in a given language."""

    id: str
    input_text: str
    output_text: str
    language: str

    def __post_init__(self):
        if not self.id:
            raise ValidationError("example id must be non-empty")
        if not self.input_text:
            raise ValidationError(f"example {self.id!r}: input text must be non-empty")
        if not self.language:
            raise ValidationError(f"example {self.id!r}: language tag must be non-empty")

    def pair_text(self) -> str:
        """The bank-side text an embedding row represents."""
        return f"{self.input_text} {self.output_text}"


@dataclass(frozen=True)
class ExampleBank:
    """A language-tagged, ordered list of examples with aligned embeddings.

    ``base_embeddings`` rows are aligned row-for-row with ``examples`` and
    hold the bank-role vectors; ``query_embeddings``, when present, holds the
    query-role vectors with the same alignment. Instances are immutable and
    safe to share across workers.
    """

    language: str
    examples: tuple[Example, ...]
    base_embeddings: np.ndarray | None = None
    query_embeddings: np.ndarray | None = None

    def __post_init__(self):
        if not self.language:
            raise ValidationError("bank language tag must be non-empty")
        seen: set[str] = set()
        for ex in self.examples:
            if ex.id in seen:
                raise ValidationError(f"duplicate example id {ex.id!r}")
            seen.add(ex.id)

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def dim(self) -> int:
        if self.base_embeddings is None:
            raise EmptyBankError(f"bank {self.language!r} has no embeddings attached")
        return self.base_embeddings.shape[1]

    def require_embeddings(self) -> np.ndarray:
        if self.base_embeddings is None:
            raise EmptyBankError(f"bank {self.language!r} has no embeddings attached")
        return self.base_embeddings

    def query_row(self, i: int) -> np.ndarray:
        """Query-role vector for example ``i`` (bank row when none attached)."""
        if self.query_embeddings is not None:
            return self.query_embeddings[i]
        return self.require_embeddings()[i]


@dataclass(frozen=True)
class BankCollection:
    """The banks of one run: target, held-out validation, and auxiliaries."""

    target: ExampleBank
    validation: ExampleBank
    auxiliaries: tuple[ExampleBank, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.target.language != self.validation.language:
            raise ValidationError(
                f"validation language {self.validation.language!r} does not match "
                f"target {self.target.language!r}"
            )
        for aux in self.auxiliaries:
            if aux.language == self.target.language:
                raise ValidationError(
                    f"auxiliary bank shares the target language tag {aux.language!r}"
                )
        dims = {b.dim for b in (self.target, self.validation, *self.auxiliaries) if b.base_embeddings is not None}
        if len(dims) > 1:
            raise ShapeError(f"banks disagree on embedding dimension: {sorted(dims)}")

    @property
    def all_training_banks(self) -> tuple[ExampleBank, ...]:
        """Target first, then auxiliaries; the order training iterates in."""
        return (self.target, *self.auxiliaries)


def ingest_bank(path: str | Path, language: str) -> ExampleBank:
    """Read a JSONL bank file, preserving file order. No embeddings attached."""
    path = Path(path)
    examples: list[Example] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ParseError(f"{path}:{lineno}: expected an object, got {type(obj).__name__}")
            try:
                ex = Example(
                    id=str(obj["id"]),
                    input_text=str(obj["input"]),
                    output_text=str(obj["output"]),
                    language=str(obj["lang"]),
                )
            except KeyError as exc:
                raise ParseError(f"{path}:{lineno}: missing key {exc.args[0]!r}") from exc
            except ValidationError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if ex.language != language:
                raise ValidationError(
                    f"{path}:{lineno}: example language {ex.language!r} does not match "
                    f"bank language {language!r}"
                )
            if ex.id in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate example id {ex.id!r}")
            seen.add(ex.id)
            examples.append(ex)
    return ExampleBank(language=language, examples=tuple(examples))


def read_embeddings(path: str | Path) -> np.ndarray:
    """Read an EMB1 file into a float64 (rows, dim) array."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 20 or raw[:4] != EMBEDDING_MAGIC:
        raise ParseError(f"{path}: not an EMB1 embedding file")
    rows, dim = struct.unpack_from("<QQ", raw, 4)
    expected = 20 + rows * dim * 4
    if len(raw) != expected:
        raise ParseError(
            f"{path}: payload is {len(raw)} bytes, header implies {expected}"
        )
    flat = np.frombuffer(raw, dtype="<f4", offset=20)
    return flat.reshape(rows, dim).astype(np.float64)


def write_embeddings(path: str | Path, matrix: np.ndarray) -> None:
    """Write a 2-D array as an EMB1 file (values stored as float32)."""
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ShapeError(f"embedding matrix must be 2-D, got shape {matrix.shape}")
    rows, dim = matrix.shape
    with Path(path).open("wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<QQ", rows, dim))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def write_bank_jsonl(examples: Sequence[Example], path: str | Path) -> None:
    """Write examples to the JSONL bank format, one per line, in order."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(
                json.dumps(
                    {"id": ex.id, "input": ex.input_text, "output": ex.output_text, "lang": ex.language},
                    ensure_ascii=False,
                )
                + "\n"
            )


def attach_embeddings(bank: ExampleBank, path: str | Path, role: str = "bank") -> ExampleBank:
    """Return a copy of ``bank`` with the embedding matrix at ``path`` attached.

    ``role`` selects which matrix is populated: ``"bank"`` (the default,
    pair-text rows) or ``"query"`` (input-only rows). Rows are used as-is; no
    normalization happens at ingestion.
    """
    if role not in ("bank", "query"):
        raise ValueError(f"unknown embedding role {role!r}")
    matrix = read_embeddings(path)
    if matrix.shape[0] != len(bank):
        raise ShapeError(
            f"{path}: expected {len(bank)} rows, found {matrix.shape[0]}"
        )
    bad = np.flatnonzero(~np.isfinite(matrix).all(axis=1))
    if bad.size:
        raise DataError(f"{path}: non-finite value at row {int(bad[0])}")
    if role == "query":
        if bank.base_embeddings is not None and matrix.shape[1] != bank.base_embeddings.shape[1]:
            raise ShapeError(
                f"{path}: query rows have dim {matrix.shape[1]}, bank rows have "
                f"dim {bank.base_embeddings.shape[1]}"
            )
        return replace(bank, query_embeddings=matrix)
    if bank.query_embeddings is not None and matrix.shape[1] != bank.query_embeddings.shape[1]:
        raise ShapeError(
            f"{path}: bank rows have dim {matrix.shape[1]}, query rows have "
            f"dim {bank.query_embeddings.shape[1]}"
        )
    return replace(bank, base_embeddings=matrix)


def bank_mean_embedding(bank: ExampleBank) -> np.ndarray:
    """Arithmetic mean of the bank-role embedding rows."""
    if len(bank) == 0:
        raise EmptyBankError(f"bank {bank.language!r} is empty")
    return np.mean(bank.require_embeddings(), axis=0)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector is undefined")
    return float(min(1.0, max(-1.0, float(np.dot(u, v)) / (nu * nv))))


def concat_banks(banks: Sequence[ExampleBank], language: str = "merged") -> ExampleBank:
    """Concatenate banks (and their matrices) into one retrieval pool.

    Example ids must stay unique across the inputs. Query-role matrices are
    concatenated only when every input bank carries one.
    """
    if not banks:
        raise EmptyBankError("cannot concatenate zero banks")
    examples: list[Example] = []
    for bank in banks:
        examples.extend(bank.examples)
    base = np.concatenate([b.require_embeddings() for b in banks], axis=0)
    query = None
    if all(b.query_embeddings is not None for b in banks):
        query = np.concatenate([b.query_embeddings for b in banks], axis=0)
    return ExampleBank(
        language=language,
        examples=tuple(examples),
        base_embeddings=base,
        query_embeddings=query,
    )
