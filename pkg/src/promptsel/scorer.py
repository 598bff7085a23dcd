"""Scoring and generation backends.

Training needs the log-probability a language model assigns to a sample's
gold output given one candidate demonstration plus the sample's input. Two
backends provide it: a remote HTTP endpoint speaking a small JSON protocol,
and an offline oracle whose rule is fixed so tests have a known ground-truth
ranking.

Scoring prompts are rendered canonically as ``"<input> <output>\\n<x>"`` (the
demonstration's pair text, a newline, the sample input); the continuation is
the sample's gold output. The oracle relies on this rendering to resolve the
texts back to bank embeddings.

Remote protocol: ``POST {endpoint}/score`` with body
``{"prompt": str, "continuation": str}`` returns ``{"logprob": number}``;
``POST {endpoint}/generate`` with ``{"prompt": str, "max_tokens": int}``
returns ``{"text": str}``. A bearer token is sent when configured.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import requests

from .corpus import Example, ExampleBank
from .errors import DegenerateVectorError, ParameterError, ProtocolError, TransportError


@dataclass(frozen=True)
class ScoreRequest:
    """One demonstration-conditioned scoring call."""

    prompt_text: str
    continuation_text: str

    def __post_init__(self):
        if not self.prompt_text or not self.continuation_text:
            raise ParameterError("score request fields must be non-empty")


@dataclass(frozen=True)
class ScoredCandidate:
    candidate_index: int
    logprob: float

    def __post_init__(self):
        if not np.isfinite(self.logprob):
            raise ParameterError(f"candidate {self.candidate_index}: logprob must be finite")


def build_score_request(candidate: Example, sample_input: str, sample_output: str) -> ScoreRequest:
    """Canonical rendering of (demonstration, sample) into a ScoreRequest."""
    return ScoreRequest(
        prompt_text=f"{candidate.pair_text()}\n{sample_input}",
        continuation_text=sample_output,
    )


def best_candidate(scored: Sequence[ScoredCandidate]) -> int:
    """Candidate index with maximal logprob; ties break to the lower index."""
    if not scored:
        raise ParameterError("cannot pick the best of zero candidates")
    best = scored[0]
    for cand in scored[1:]:
        if cand.logprob > best.logprob or (
            cand.logprob == best.logprob and cand.candidate_index < best.candidate_index
        ):
            best = cand
    return best.candidate_index


class Scorer(Protocol):
    def score(self, request: ScoreRequest) -> float: ...

    def score_many(self, requests_: Sequence[ScoreRequest]) -> list[float]: ...

    def generate(self, prompt: str, max_tokens: int = 64) -> str: ...


class OracleScorer:
    """Deterministic offline stand-in for the scoring/generation model.

    Scoring rule: ``score(y | a, x) = -||e(a) - e(x, y)||^2`` where ``e`` is
    the unit-normalized bank-role base embedding of the demonstration ``a``
    and of the sample pair ``(x, y)``. Identical embeddings score 0, the
    maximum. Both texts are resolved by exact lookup against the seed banks,
    so the oracle is a pure function of the request given those banks.

    Generation rule: locate the query as the known example whose input occurs
    last in the prompt, then return the gold output of the nearest other
    example under the same normalized-embedding distance.
    """

    def __init__(self, banks: Sequence[ExampleBank]):
        self._pair_to_vec: dict[str, np.ndarray] = {}
        self._entries: list[tuple[Example, np.ndarray]] = []
        for bank in banks:
            rows = bank.require_embeddings()
            norms = np.linalg.norm(rows, axis=1)
            if np.any(norms == 0.0):
                raise DegenerateVectorError(
                    f"bank {bank.language!r} contains a zero-norm embedding row"
                )
            unit = rows / norms[:, None]
            for i, ex in enumerate(bank.examples):
                key = ex.pair_text()
                if key not in self._pair_to_vec:
                    self._pair_to_vec[key] = unit[i]
                self._entries.append((ex, unit[i]))
        # longest first so one demo text being a prefix of another resolves greedily
        self._demo_keys = sorted(self._pair_to_vec, key=len, reverse=True)

    def _lookup(self, text: str, what: str) -> np.ndarray:
        try:
            return self._pair_to_vec[text]
        except KeyError:
            raise ParameterError(f"oracle does not know the {what} text {text!r}") from None

    def score(self, request: ScoreRequest) -> float:
        prompt = request.prompt_text
        for key in self._demo_keys:
            if prompt.startswith(key + "\n"):
                demo_vec = self._pair_to_vec[key]
                sample_key = f"{prompt[len(key) + 1:]} {request.continuation_text}"
                sample_vec = self._lookup(sample_key, "sample")
                diff = demo_vec - sample_vec
                return float(-np.dot(diff, diff))
        raise ParameterError("oracle cannot resolve the demonstration in the prompt")

    def score_many(self, requests_: Sequence[ScoreRequest]) -> list[float]:
        return [self.score(r) for r in requests_]

    def generate(self, prompt: str, max_tokens: int = 64) -> str:
        # the query block sits last in the prompt: rightmost (then longest) match wins
        query = None
        best_key = (-1, -1)
        for ex, vec in self._entries:
            pos = prompt.rfind(ex.input_text)
            if pos < 0:
                continue
            key = (pos, len(ex.input_text))
            if key > best_key:
                query = (ex, vec)
                best_key = key
        if query is None:
            raise ParameterError("oracle cannot locate a known query in the prompt")
        q_ex, q_vec = query
        best_ex = None
        best_dist = np.inf
        for ex, vec in self._entries:
            if ex.id == q_ex.id and ex.language == q_ex.language:
                continue
            dist = float(np.dot(vec - q_vec, vec - q_vec))
            if dist < best_dist:
                best_ex, best_dist = ex, dist
        if best_ex is None:
            raise ParameterError("oracle bank has no example to generate from")
        return best_ex.output_text


class RemoteScorer:
    """HTTP client for a scoring/generation endpoint.

    Failed calls are retried with bounded exponential backoff; after
    ``retries`` retries a TransportError reports the count. Batched scoring
    runs at most ``max_concurrency`` requests in flight and joins results in
    request order. The client never mutates retriever or bank state.
    """

    def __init__(
        self,
        endpoint: str,
        token: str | None = None,
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.25,
        max_concurrency: int = 8,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.max_concurrency = max_concurrency
        self._session = session or requests.Session()
        if token:
            self._session.headers["Authorization"] = f"Bearer {token}"

    def _post(self, path: str, payload: dict) -> dict:
        last_exc: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._session.post(
                    f"{self.endpoint}{path}", json=payload, timeout=self.timeout
                )
                if resp.status_code >= 500:
                    last_exc = TransportError(f"{path}: server returned {resp.status_code}")
                    continue
                resp.raise_for_status()
                body = resp.json()
                if not isinstance(body, dict):
                    raise ProtocolError(f"{path}: expected a JSON object, got {type(body).__name__}")
                return body
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_exc = exc
            except requests.HTTPError as exc:
                raise TransportError(f"{path}: {exc}") from exc
            except ValueError as exc:  # undecodable JSON
                raise ProtocolError(f"{path}: response is not valid JSON") from exc
        raise TransportError(
            f"{path}: unreachable after {self.retries} retries"
        ) from last_exc

    def score(self, request: ScoreRequest) -> float:
        body = self._post(
            "/score",
            {"prompt": request.prompt_text, "continuation": request.continuation_text},
        )
        value = body.get("logprob")
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ProtocolError(f"/score: missing or non-numeric 'logprob' in {body!r}")
        return float(value)

    def score_many(self, requests_: Sequence[ScoreRequest]) -> list[float]:
        if not requests_:
            return []
        workers = max(1, min(self.max_concurrency, len(requests_)))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(self.score, requests_))

    def generate(self, prompt: str, max_tokens: int = 64) -> str:
        body = self._post("/generate", {"prompt": prompt, "max_tokens": max_tokens})
        text = body.get("text")
        if not isinstance(text, str):
            raise ProtocolError(f"/generate: missing or non-string 'text' in {body!r}")
        return text
