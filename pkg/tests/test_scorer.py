import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from promptsel.errors import ParameterError, ProtocolError, TransportError
from promptsel.scorer import (
    OracleScorer,
    RemoteScorer,
    ScoredCandidate,
    ScoreRequest,
    best_candidate,
    build_score_request,
)

from conftest import make_bank


class TestBestCandidate:
    def test_strict_max(self):
        assert best_candidate([ScoredCandidate(0, -2.0), ScoredCandidate(1, -1.0)]) == 1

    def test_tie_breaks_low(self):
        assert best_candidate([ScoredCandidate(0, -1.0), ScoredCandidate(1, -1.0)]) == 0

    def test_matches_linear_scan(self, rng):
        scores = rng.standard_normal(10)
        scored = [ScoredCandidate(i, float(s)) for i, s in enumerate(scores)]
        best, best_idx = -np.inf, None
        for i, s in enumerate(scores):
            if s > best:
                best, best_idx = s, i
        assert best_candidate(scored) == best_idx

    def test_empty_rejected(self):
        with pytest.raises(ParameterError):
            best_candidate([])

    def test_argmax_invariant_under_shift(self, rng):
        scores = rng.standard_normal(8)
        scored = [ScoredCandidate(i, float(s)) for i, s in enumerate(scores)]
        shifted = [ScoredCandidate(i, float(2.5 * s + 7.0)) for i, s in enumerate(scores)]
        assert best_candidate(scored) == best_candidate(shifted)


def oracle_bank():
    # unit vectors: query at 0 deg, candidates at 60 and 180 deg
    return make_bank(
        "mni",
        [("query text", "gold"), ("near text", "n"), ("far text", "f")],
        embeddings=[[1.0, 0.0], [0.5, np.sqrt(3.0) / 2.0], [-1.0, 0.0]],
    )


class TestOracle:
    def test_identical_embeddings_score_zero(self):
        bank = make_bank(
            "mni",
            [("same a", "1"), ("same b", "2")],
            embeddings=[[3.0, 4.0], [3.0, 4.0]],
        )
        oracle = OracleScorer([bank])
        req = build_score_request(bank.examples[0], "same b", "2")
        assert oracle.score(req) == 0.0

    def test_distance_rule_arithmetic(self):
        bank = oracle_bank()
        oracle = OracleScorer([bank])
        sample = bank.examples[0]
        near = oracle.score(build_score_request(bank.examples[1], sample.input_text, sample.output_text))
        far = oracle.score(build_score_request(bank.examples[2], sample.input_text, sample.output_text))
        assert near == pytest.approx(-1.0, abs=1e-12)
        assert far == pytest.approx(-4.0, abs=1e-12)
        assert near > far  # candidate at 60 degrees ranks first

    def test_deterministic_bit_for_bit(self):
        bank = oracle_bank()
        oracle = OracleScorer([bank])
        req = build_score_request(bank.examples[1], "query text", "gold")
        values = {oracle.score(req) for _ in range(5)}
        assert len(values) == 1

    def test_unknown_text_rejected(self):
        oracle = OracleScorer([oracle_bank()])
        with pytest.raises(ParameterError):
            oracle.score(ScoreRequest("no such demo\nquery text", "gold"))

    def test_generate_returns_nearest_gold_output(self):
        bank = make_bank(
            "mni",
            [("alpha input", "alpha out"), ("beta input", "beta out"), ("gamma input", "gamma out")],
            embeddings=[[1.0, 0.0], [0.9, 0.1], [-1.0, 0.0]],
        )
        oracle = OracleScorer([bank])
        out = oracle.generate("some instruction\nInput: alpha input\nOutput:")
        assert out == "beta out"  # nearest to alpha by unit embedding, excluding itself

    def test_score_many_preserves_order(self):
        bank = oracle_bank()
        oracle = OracleScorer([bank])
        sample = bank.examples[0]
        reqs = [
            build_score_request(bank.examples[2], sample.input_text, sample.output_text),
            build_score_request(bank.examples[1], sample.input_text, sample.output_text),
        ]
        got = oracle.score_many(reqs)
        assert got[0] == pytest.approx(-4.0, abs=1e-12)
        assert got[1] == pytest.approx(-1.0, abs=1e-12)


class _Handler(BaseHTTPRequestHandler):
    responses: dict[str, object] = {}
    raw_body: bytes | None = None
    fail_times = 0

    def do_POST(self):
        cls = type(self)
        if cls.fail_times > 0:
            cls.fail_times -= 1
            self.send_response(503)
            self.end_headers()
            return
        length = int(self.headers.get("Content-Length", 0))
        self.rfile.read(length)
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        if cls.raw_body is not None:
            self.wfile.write(cls.raw_body)
        else:
            self.wfile.write(json.dumps(cls.responses[self.path]).encode())

    def log_message(self, *args):
        pass


@pytest.fixture
def http_server():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _Handler.responses = {}
    _Handler.raw_body = None
    _Handler.fail_times = 0
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


class TestRemote:
    def test_logprob_passthrough(self, http_server):
        _Handler.responses = {"/score": {"logprob": -3.25}}
        scorer = RemoteScorer(http_server)
        assert scorer.score(ScoreRequest("p", "c")) == -3.25

    def test_generate_passthrough(self, http_server):
        _Handler.responses = {"/generate": {"text": "ok"}}
        assert RemoteScorer(http_server).generate("p") == "ok"

    def test_unreachable_reports_retry_count(self):
        scorer = RemoteScorer("http://127.0.0.1:1", retries=2, backoff=0.0, timeout=0.2)
        with pytest.raises(TransportError, match="2 retries"):
            scorer.score(ScoreRequest("p", "c"))

    def test_recovers_after_transient_5xx(self, http_server):
        _Handler.responses = {"/score": {"logprob": 1.5}}
        _Handler.fail_times = 2
        scorer = RemoteScorer(http_server, retries=3, backoff=0.0)
        assert scorer.score(ScoreRequest("p", "c")) == 1.5

    def test_malformed_payload_is_protocol_error(self, http_server):
        _Handler.responses = {"/score": {"nope": 1}}
        with pytest.raises(ProtocolError, match="logprob"):
            RemoteScorer(http_server).score(ScoreRequest("p", "c"))

    def test_non_json_payload_is_protocol_error(self, http_server):
        _Handler.raw_body = b"not json"
        with pytest.raises(ProtocolError):
            RemoteScorer(http_server).score(ScoreRequest("p", "c"))

    def test_score_many_joins_in_request_order(self, http_server):
        _Handler.responses = {"/score": {"logprob": 0.5}}
        scorer = RemoteScorer(http_server, max_concurrency=4)
        got = scorer.score_many([ScoreRequest(f"p{i}", "c") for i in range(10)])
        assert got == [0.5] * 10
