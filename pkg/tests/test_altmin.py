import numpy as np
import pytest

from promptsel.altmin import (
    derive_rng,
    merge_params,
    run_alternating_minimization,
    select_auxiliary,
    validate,
)
from promptsel.config import RunConfig
from promptsel.corpus import BankCollection
from promptsel.errors import ParameterError, ShapeError
from promptsel.retriever import (
    RelevanceSample,
    RetrieverParams,
    identity_params,
    train_relevance,
)
from promptsel.scorer import OracleScorer

from conftest import make_bank


def bank_with_mean(language, mean, n=3):
    """Bank whose rows all equal ``mean`` so the bank mean is exact."""
    rows = np.tile(np.asarray(mean, dtype=float), (n, 1))
    return make_bank(language, [(f"{language} t{i}", "o") for i in range(n)], embeddings=rows)


def banks_at_cosines(cosines):
    """Candidate banks whose mean-embedding cosine to the target is exact."""
    target = bank_with_mean("tgt", [1.0, 0.0])
    banks = []
    for i, c in enumerate(cosines):
        v = [c, float(np.sqrt(1.0 - c * c))]
        banks.append(bank_with_mean(f"aux{i}", v))
    return target, banks


class TestSelectAuxiliary:
    def test_identical_bank_always_selected(self):
        target = bank_with_mean("tgt", [0.3, 0.4])
        twin = bank_with_mean("aux0", [0.3, 0.4])
        for delta in (0.0, 50.0, 95.0, 100.0):
            sel = select_auxiliary(target, [twin], delta)
            assert sel.similarities["aux0"] == pytest.approx(1.0, abs=1e-12)
            assert sel.selected == ("aux0",)

    def test_percentile_arithmetic(self):
        # sorted sims [-0.2, 0.05, 0.1, 0.5, 0.9]; the 95th linear percentile
        # sits at position 3.8: 0.5 + 0.8 * (0.9 - 0.5) = 0.82
        target, banks = banks_at_cosines([0.9, 0.5, 0.1, -0.2, 0.05])
        sel = select_auxiliary(target, banks, 95.0)
        assert sel.threshold == pytest.approx(0.82, abs=1e-9)
        assert sel.selected == ("aux0",)

    def test_delta_zero_selects_all(self):
        target, banks = banks_at_cosines([0.9, 0.5, 0.1, -0.2, 0.05])
        sel = select_auxiliary(target, banks, 0.0)
        assert set(sel.selected) == {f"aux{i}" for i in range(5)}

    def test_threshold_comparison_is_inclusive(self):
        # median of three values IS the middle similarity: that bank must stay
        target, banks = banks_at_cosines([0.2, 0.4, 0.6])
        sel = select_auxiliary(target, banks, 50.0)
        assert sel.threshold == sel.similarities["aux1"]
        assert "aux1" in sel.selected

    def test_empty_candidates_rejected(self):
        target = bank_with_mean("tgt", [1.0, 0.0])
        with pytest.raises(ParameterError):
            select_auxiliary(target, [], 95.0)


class TestMerge:
    def test_idempotent_on_copies(self, rng):
        W = rng.standard_normal((4, 4))
        merged = merge_params([RetrieverParams(W), RetrieverParams(W.copy())])
        np.testing.assert_array_equal(merged.projection, W)

    def test_scalar_mean(self):
        merged = merge_params([identity_params(3), RetrieverParams(3.0 * np.eye(3))])
        np.testing.assert_array_equal(merged.projection, 2.0 * np.eye(3))

    def test_matches_entrywise_oracle(self, rng):
        mats = [rng.standard_normal((5, 5)) for _ in range(4)]
        merged = merge_params([RetrieverParams(m) for m in mats])
        want = np.zeros((5, 5))
        for i in range(5):
            for j in range(5):
                want[i, j] = sum(m[i, j] for m in mats) / 4.0
        np.testing.assert_allclose(merged.projection, want, atol=1e-12)

    def test_permutation_invariant(self, rng):
        mats = [RetrieverParams(rng.standard_normal((4, 4))) for _ in range(5)]
        a = merge_params(mats)
        b = merge_params(list(reversed(mats)))
        np.testing.assert_allclose(a.projection, b.projection, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            merge_params([identity_params(3), identity_params(4)])


def labels_with_ranks(rng, ranks, f=4):
    """Validation labels where the positive lands at the given 1-based ranks.

    Candidates sit at distinct angles from the query; the positive is the
    candidate whose similarity rank should equal ``rank``.
    """
    samples = []
    for rank in ranks:
        q = np.array([1.0, 0.0])
        angles = np.linspace(0.1, 1.2, f)  # ascending angle = descending similarity
        cands = np.stack([np.array([np.cos(a), np.sin(a)]) for a in angles])
        samples.append(
            RelevanceSample(
                sample_index=0,
                candidate_indices=tuple(range(f)),
                positive=rank - 1,
                query_base=q,
                candidate_bases=cands,
            )
        )
    return samples


class TestValidate:
    def test_perfect_ranking_scores_one(self, rng):
        from promptsel.altmin import ValidationLabels

        labels = ValidationLabels(samples=tuple(labels_with_ranks(rng, [1, 1, 1])))
        assert validate(identity_params(2), labels) == 1.0

    def test_always_second_scores_half(self, rng):
        from promptsel.altmin import ValidationLabels

        labels = ValidationLabels(samples=tuple(labels_with_ranks(rng, [2, 2])))
        assert validate(identity_params(2), labels) == 0.5

    def test_matches_rank_scan_oracle(self, rng):
        from promptsel.altmin import ValidationLabels
        from promptsel.retriever import embed, embed_rows

        params = RetrieverParams(rng.standard_normal((5, 5)) + np.eye(5))
        samples = []
        for _ in range(6):
            samples.append(
                RelevanceSample(
                    sample_index=0,
                    candidate_indices=tuple(range(5)),
                    positive=int(rng.integers(5)),
                    query_base=rng.standard_normal(5),
                    candidate_bases=rng.standard_normal((5, 5)),
                )
            )
        labels = ValidationLabels(samples=tuple(samples))
        total = 0.0
        for s in samples:
            sims = embed_rows(params, s.candidate_bases) @ embed(params, s.query_base)
            order = sorted(range(5), key=lambda i: (-sims[i], i))
            total += 1.0 / (order.index(s.positive) + 1)
        assert validate(params, labels) == pytest.approx(total / 6, abs=1e-12)


def tiny_collection(rng, with_aux=True):
    d = 6
    centers = {"tgt": np.eye(d)[0], "aux": np.eye(d)[0] * 0.9 + np.eye(d)[1] * 0.436}

    def cluster_bank(lang, center, n, prefix):
        rows = center + 0.15 * rng.standard_normal((n, d))
        texts = [(f"{lang} shared item {prefix}{i:02d}", f"{lang} out {i % 4}") for i in range(n)]
        return make_bank(lang, texts, embeddings=rows, id_prefix=f"{prefix}-")

    target = cluster_bank("tgt", centers["tgt"], 16, "t")
    validation = cluster_bank("tgt", centers["tgt"], 8, "v")
    aux = (cluster_bank("aux", centers["aux"], 16, "a"),) if with_aux else ()
    return BankCollection(target=target, validation=validation, auxiliaries=aux)


class TestAlternating:
    def config(self, **kw):
        base = dict(iterations=3, epochs=4, batch_size=8, learning_rate=1e-3, candidates=6, k=2)
        base.update(kw)
        return RunConfig(**base)

    def test_single_bank_reduces_to_relevance_training(self, rng):
        collection = tiny_collection(rng, with_aux=False)
        scorer = OracleScorer([collection.target, collection.validation])
        config = self.config(iterations=1)
        state = run_alternating_minimization(collection, scorer, config)
        direct = train_relevance(
            collection.target, scorer, config, derive_rng(config.seed, 1, 0)
        )
        np.testing.assert_array_equal(state.merged.projection, direct.projection)

    def test_best_checkpoint_matches_trace_argmax(self, rng):
        collection = tiny_collection(rng)
        scorer = OracleScorer([collection.target, collection.validation, *collection.auxiliaries])
        state = run_alternating_minimization(collection, scorer, self.config())
        best_iter = int(np.argmax(state.trace)) + 1
        assert state.best_iteration == best_iter
        assert state.best_score == max(state.trace)
        np.testing.assert_array_equal(
            state.best_params.projection, state.checkpoints[best_iter - 1].projection
        )

    def test_trace_length_equals_iterations(self, rng):
        collection = tiny_collection(rng)
        scorer = OracleScorer([collection.target, collection.validation, *collection.auxiliaries])
        config = self.config(iterations=4)
        state = run_alternating_minimization(collection, scorer, config)
        assert len(state.trace) == 4
        assert state.iterations_run == 4

    def test_identical_banks_same_stream_merge_fixed_point(self, rng):
        collection = tiny_collection(rng, with_aux=False)
        scorer = OracleScorer([collection.target, collection.validation])
        config = self.config(iterations=1)
        stream = derive_rng(7, 1, 0)
        phi1 = train_relevance(collection.target, scorer, config, derive_rng(7, 1, 0))
        phi2 = train_relevance(collection.target, scorer, config, stream)
        np.testing.assert_array_equal(phi1.projection, phi2.projection)
        merged = merge_params([phi1, phi2])
        np.testing.assert_array_equal(merged.projection, phi1.projection)

    def test_rerun_is_bit_identical(self, rng):
        collection = tiny_collection(rng)
        scorer = OracleScorer([collection.target, collection.validation, *collection.auxiliaries])
        config = self.config(iterations=2)
        a = run_alternating_minimization(collection, scorer, config)
        b = run_alternating_minimization(collection, scorer, config)
        np.testing.assert_array_equal(a.merged.projection, b.merged.projection)
        assert a.trace == b.trace
