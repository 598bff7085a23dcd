import math

import numpy as np
import pytest

from promptsel._core import available_backends
from promptsel.config import RunConfig
from promptsel.dpp import (
    DppKernel,
    KernelContext,
    SubsetSample,
    build_kernel,
    dpp_grad,
    dpp_loss,
    greedy_map,
    greedy_map_with_gains,
    log_det,
    retrieve,
    train_dpp,
)
from promptsel.errors import ParameterError
from promptsel.retriever import RetrieverParams, embed, embed_rows, identity_params

from conftest import make_bank
from oracles import (
    exhaustive_best_logdet,
    finite_difference_grad,
    grad_rel_error,
    logdet_cofactor,
    naive_greedy,
    random_psd_kernel,
)


def kernel_from_matrix(Z):
    n = Z.shape[0]
    return DppKernel(matrix=Z, relevance=np.sqrt(np.diag(Z)), similarity=np.eye(n))


def random_context(rng, n, d, lam=1.0):
    return KernelContext(
        pool_bases=rng.standard_normal((n, d)),
        query_base=rng.standard_normal(d),
        tradeoff=lam,
    )


class TestBuildKernel:
    def test_duplicate_rows_are_rank_deficient(self, rng):
        rows = rng.standard_normal((4, 5))
        rows[1] = rows[0]
        kernel = build_kernel(identity_params(5), rows, rng.standard_normal(5))
        assert kernel.similarity[0, 1] == pytest.approx(1.0, abs=1e-12)
        assert np.linalg.det(kernel.matrix[:2, :2]) == pytest.approx(0.0, abs=1e-12)

    def test_singleton_det_is_squared_relevance(self, rng):
        kernel = build_kernel(identity_params(4), rng.standard_normal((5, 4)), rng.standard_normal(4))
        for i in range(5):
            assert kernel.matrix[i, i] == pytest.approx(kernel.relevance[i] ** 2, rel=1e-12)

    def test_entrywise_reconstruction(self, rng):
        params = RetrieverParams(rng.standard_normal((4, 4)) + np.eye(4))
        rows = rng.standard_normal((6, 4))
        q = rng.standard_normal(4)
        kernel = build_kernel(params, rows, q, tradeoff=1.3)
        rebuilt = np.empty((6, 6))
        for i in range(6):
            for j in range(6):
                rebuilt[i, j] = kernel.relevance[i] * kernel.similarity[i, j] * kernel.relevance[j]
        np.testing.assert_allclose(kernel.matrix, rebuilt, atol=1e-12)

    def test_kernel_is_psd(self, rng):
        for _ in range(20):
            params = RetrieverParams(rng.standard_normal((5, 5)) + np.eye(5))
            kernel = build_kernel(
                params, rng.standard_normal((8, 5)), rng.standard_normal(5), tradeoff=0.7
            )
            np.linalg.cholesky(kernel.matrix + 1e-10 * np.eye(8))  # must not raise

    def test_relevance_is_monotone_in_similarity(self, rng):
        params = identity_params(3)
        rows = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        q = np.array([1.0, 0.0, 0.0])
        kernel = build_kernel(params, rows, q)
        assert kernel.relevance[0] > kernel.relevance[1]


class TestLogDet:
    def test_empty_subset_is_zero(self, rng):
        kernel = kernel_from_matrix(random_psd_kernel(rng, 4))
        assert log_det(kernel, []) == 0.0

    def test_singleton(self, rng):
        Z = random_psd_kernel(rng, 5)
        kernel = kernel_from_matrix(Z)
        for i in range(5):
            assert log_det(kernel, [i]) == pytest.approx(math.log(Z[i, i]), rel=1e-12)

    def test_matches_cofactor_oracle(self, rng):
        for _ in range(10):
            n = int(rng.integers(3, 8))
            Z = random_psd_kernel(rng, n, d=n + 2)  # full rank: every subset nonsingular
            kernel = kernel_from_matrix(Z)
            size = int(rng.integers(1, min(n, 6) + 1))
            subset = list(rng.choice(n, size=size, replace=False))
            want = logdet_cofactor(Z[np.ix_(subset, subset)])
            assert log_det(kernel, subset) == pytest.approx(want, abs=1e-8)

    def test_out_of_range_rejected(self, rng):
        kernel = kernel_from_matrix(random_psd_kernel(rng, 3))
        with pytest.raises(ParameterError):
            log_det(kernel, [0, 3])

    def test_repeated_index_rejected(self, rng):
        kernel = kernel_from_matrix(random_psd_kernel(rng, 3))
        with pytest.raises(ParameterError):
            log_det(kernel, [1, 1])

    def test_singular_subset_is_strongly_penalized(self, rng):
        rows = rng.standard_normal((4, 5))
        rows[1] = rows[0]
        kernel = build_kernel(identity_params(5), rows, rng.standard_normal(5))
        assert log_det(kernel, [0, 1]) < math.log(1e-8)


class TestGreedyMap:
    def test_diagonal_kernel_picks_largest(self):
        Z = np.diag([0.5, 3.0, 1.0, 2.0])
        kernel = kernel_from_matrix(Z)
        assert greedy_map(kernel, 2) == [1, 3]

    def test_never_selects_both_duplicates(self, rng):
        rows = rng.standard_normal((6, 4))
        rows[2] = rows[5]
        kernel = build_kernel(identity_params(4), rows, rng.standard_normal(4))
        picked = greedy_map(kernel, 2)
        assert not {2, 5} <= set(picked)

    @pytest.mark.parametrize("backend", sorted(available_backends()))
    def test_matches_naive_oracle(self, rng, backend, monkeypatch):
        import promptsel.dpp as dpp_module

        fn = available_backends()[backend]
        monkeypatch.setattr(dpp_module._core, "_impl", __import__("types").SimpleNamespace(greedy_map_kernel=fn))
        for _ in range(25):
            Z = random_psd_kernel(rng, 12)
            kernel = kernel_from_matrix(Z)
            got_idx, got_gains = greedy_map_with_gains(kernel, 4)
            want_idx, want_gains = naive_greedy(Z, 4)
            assert got_idx == want_idx
            np.testing.assert_allclose(got_gains, want_gains, atol=1e-9)

    def test_backends_agree(self, rng):
        backends = available_backends()
        if len(backends) < 2:
            pytest.skip("compiled backend not built")
        for _ in range(25):
            Z = np.ascontiguousarray(random_psd_kernel(rng, 15))
            results = {
                name: fn(Z, 5, 1e-12) for name, fn in backends.items()
            }
            a, b = results["numpy"], results["compiled"]
            np.testing.assert_array_equal(a[0], b[0])
            np.testing.assert_allclose(a[1], b[1], atol=1e-9)

    def test_never_beats_exhaustive(self, rng):
        for _ in range(10):
            n = int(rng.integers(5, 11))
            k = int(rng.integers(1, 4))
            Z = random_psd_kernel(rng, n)
            kernel = kernel_from_matrix(Z)
            _, gains = greedy_map_with_gains(kernel, k)
            assert sum(gains) <= exhaustive_best_logdet(Z, len(gains)) + 1e-9

    def test_optimal_on_diagonally_dominant(self, rng):
        for _ in range(10):
            n, k = 8, 3
            diag = 1.0 + rng.permutation(n).astype(float)
            Z = np.diag(diag) + 1e-3 * random_psd_kernel(rng, n)
            kernel = kernel_from_matrix(Z)
            _, gains = greedy_map_with_gains(kernel, k)
            assert sum(gains) == pytest.approx(exhaustive_best_logdet(Z, k), abs=1e-9)

    def test_k_bounds(self, rng):
        kernel = kernel_from_matrix(random_psd_kernel(rng, 4))
        with pytest.raises(ParameterError):
            greedy_map(kernel, 5)
        with pytest.raises(ParameterError):
            greedy_map(kernel, 0)


class TestDppLoss:
    def test_equal_subsets_sit_on_the_hinge(self, rng):
        ctx = random_context(rng, 8, 4)
        sample = SubsetSample(0, (1, 3, 5), ((1, 3, 5),))
        assert dpp_loss(identity_params(4), sample, ctx) == 0.0

    def test_satisfied_margin_is_zero(self, rng):
        # positive = greedy MAP subset, negative = a weak subset
        ctx = random_context(rng, 10, 5)
        params = identity_params(5)
        kernel = build_kernel(params, ctx.pool_bases, ctx.query_base, ctx.tradeoff)
        positive = tuple(greedy_map(kernel, 3))
        lds = {i: log_det(kernel, [i]) for i in range(10)}
        weakest = sorted(lds, key=lds.get)[:3]
        duplicated = ctx.pool_bases.copy()
        duplicated[weakest[1]] = duplicated[weakest[0]]  # make the negative near-singular
        ctx2 = KernelContext(duplicated, ctx.query_base, ctx.tradeoff)
        sample = SubsetSample(0, positive, (tuple(weakest),))
        assert dpp_loss(params, sample, ctx2) == 0.0

    def test_matches_log_det_recomputation(self, rng):
        for _ in range(10):
            ctx = random_context(rng, 10, 6)
            params = RetrieverParams(rng.standard_normal((6, 6)) + np.eye(6))
            pos = tuple(int(i) for i in rng.choice(10, 3, replace=False))
            negs = tuple(tuple(int(i) for i in rng.choice(10, 3, replace=False)) for _ in range(2))
            sample = SubsetSample(0, pos, negs)
            kernel = build_kernel(params, ctx.pool_bases, ctx.query_base, ctx.tradeoff)
            want = sum(
                max(0.0, log_det(kernel, list(neg)) - log_det(kernel, list(pos)))
                for neg in negs
            )
            assert dpp_loss(params, sample, ctx) == pytest.approx(want, abs=1e-9)

    def test_invariant_under_negative_relabeling(self, rng):
        ctx = random_context(rng, 9, 5)
        params = RetrieverParams(rng.standard_normal((5, 5)) + np.eye(5))
        negs = [tuple(int(i) for i in rng.choice(9, 3, replace=False)) for _ in range(3)]
        pos = tuple(int(i) for i in rng.choice(9, 3, replace=False))
        a = SubsetSample(0, pos, tuple(negs))
        b = SubsetSample(0, pos, tuple(reversed(negs)))
        assert dpp_loss(params, a, ctx) == pytest.approx(dpp_loss(params, b, ctx), abs=1e-12)

    def test_gradient_matches_finite_differences(self, rng):
        checked = 0
        while checked < 5:
            ctx = random_context(rng, 10, 6)
            W = rng.standard_normal((6, 6)) + 1.5 * np.eye(6)
            pos = tuple(int(i) for i in rng.choice(10, 3, replace=False))
            negs = tuple(tuple(int(i) for i in rng.choice(10, 3, replace=False)) for _ in range(2))
            sample = SubsetSample(0, pos, negs)

            def loss_at(M):
                return dpp_loss(RetrieverParams(M), sample, ctx)

            # keep away from hinge kinks where finite differences are invalid
            params = RetrieverParams(W)
            kernel = build_kernel(params, ctx.pool_bases, ctx.query_base, ctx.tradeoff)
            diffs = [
                log_det(kernel, list(neg)) - log_det(kernel, list(pos)) for neg in negs
            ]
            if any(abs(d) < 1e-3 for d in diffs):
                continue
            analytic = dpp_grad(params, sample, ctx)
            fd = finite_difference_grad(loss_at, W)
            assert grad_rel_error(analytic, fd) < 1e-4
            checked += 1


def clustered_bank(rng, clusters=4, per_cluster=6, d=8, spread=0.05):
    centers = np.zeros((clusters, d))
    for g in range(clusters):
        centers[g, g] = 1.0
    texts, rows = [], []
    for g in range(clusters):
        for i in range(per_cluster):
            rows.append(centers[g] + spread * rng.standard_normal(d))
            texts.append((f"c{g} item {g}-{i}", f"out c{g}"))
    return make_bank("tgt", texts, embeddings=np.array(rows)), centers


class TestTrainDpp:
    def test_duplicated_clusters_yield_cluster_coverage(self, rng):
        bank, centers = clustered_bank(rng)
        config = RunConfig(
            k=4, subsets=4, dpp_epochs=5, batch_size=8, learning_rate=1e-3,
            dpp_pool=23, candidates=8,
        )
        result = train_dpp(identity_params(8), bank, config, np.random.default_rng(11))
        held_out = [
            centers[g] + 0.05 * rng.standard_normal(8) for g in range(4) for _ in range(5)
        ]
        hits = 0
        for q in held_out:
            picked = retrieve(result.params, bank, q, 4).indices
            clusters_hit = {i // 6 for i in picked}
            hits += len(clusters_hit) == 4
        assert hits >= 18  # one item per cluster on >= 90% of 20 queries

    def test_training_is_deterministic(self, rng):
        bank, _ = clustered_bank(rng, clusters=3, per_cluster=5)
        config = RunConfig(k=3, subsets=3, dpp_epochs=2, batch_size=8, dpp_pool=14)
        a = train_dpp(identity_params(8), bank, config, np.random.default_rng(5))
        b = train_dpp(identity_params(8), bank, config, np.random.default_rng(5))
        np.testing.assert_array_equal(a.params.projection, b.params.projection)


class TestRetrieve:
    def test_k1_returns_most_relevant(self, rng):
        bank, _ = clustered_bank(rng, clusters=3, per_cluster=4)
        params = identity_params(8)
        q = rng.standard_normal(8)
        result = retrieve(params, bank, q, 1)
        E = embed_rows(params, bank.base_embeddings)
        sims = E @ embed(params, q)
        assert result.indices[0] == int(np.argmax(sims))

    def test_output_matches_greedy_and_sort_oracle(self, rng):
        bank, _ = clustered_bank(rng, clusters=2, per_cluster=5)
        params = RetrieverParams(rng.standard_normal((8, 8)) + np.eye(8))
        q = rng.standard_normal(8)
        result = retrieve(params, bank, q, 3)
        kernel = build_kernel(params, bank.base_embeddings, q)
        picked = greedy_map(kernel, 3)
        assert set(result.indices) == set(picked)
        assert list(result.similarities) == sorted(result.similarities)

    def test_k_exceeding_bank_rejected(self, rng):
        bank, _ = clustered_bank(rng, clusters=2, per_cluster=2)
        with pytest.raises(ParameterError):
            retrieve(identity_params(8), bank, rng.standard_normal(8), 5)

    def test_accepts_bank_sequence(self, rng):
        a, _ = clustered_bank(rng, clusters=2, per_cluster=3)
        rows = rng.standard_normal((4, 8))
        b = make_bank("aux", [(f"b{i}", "o") for i in range(4)], embeddings=rows)
        result = retrieve(identity_params(8), [a, b], rng.standard_normal(8), 4)
        assert len(result.examples) == 4


class TestDrawSubsets:
    def test_duplicate_saturated_pools_are_skipped(self, rng):
        from promptsel.dpp import draw_subsets

        # 3 unique embeddings copied 4x: pools cannot host 4 distinct items
        unique = rng.standard_normal((3, 6))
        rows = np.repeat(unique, 4, axis=0)
        bank = make_bank("tgt", [(f"t{i}", "o") for i in range(12)], embeddings=rows)
        config = RunConfig(k=4, subsets=3, dpp_pool=11, candidates=4)
        samples, contexts, diag = draw_subsets(
            identity_params(6), bank, config, np.random.default_rng(0)
        )
        assert samples == []
        assert diag["skipped_samples"] == 12

    def test_positive_is_greedy_map_of_pool(self, rng):
        from promptsel.dpp import draw_subsets

        bank, _ = clustered_bank(rng, clusters=3, per_cluster=5)
        config = RunConfig(k=3, subsets=2, dpp_pool=14, candidates=4)
        params = identity_params(8)
        samples, contexts, _ = draw_subsets(params, bank, config, np.random.default_rng(1))
        assert len(samples) == 15
        for sample, ctx in zip(samples[:3], contexts[:3]):
            kernel = build_kernel(params, ctx.pool_bases, ctx.query_base, ctx.tradeoff)
            assert list(sample.positive) == greedy_map(kernel, 3)
            for neg in sample.negatives:
                assert len(set(neg)) == 3
