import numpy as np
import pytest

from utils.combine import WeightedDrawSet, allocate, materialize, thin_resample, weighted_expectation
from utils.draws import ChainDraws, EstimandSeries, assemble, estimand_from_params
from utils.errors import BoundViolation, DimensionMismatch, DomainError
from utils.stacking import ChainWeights


def _draw_set(rng, sizes=(20, 20), locs=None):
    locs = locs if locs is not None else [0.0] * len(sizes)
    chains = []
    for k, (size, loc) in enumerate(zip(sizes, locs)):
        mu = rng.normal(loc, 1.0, size=size)
        log_lik = -0.5 * (mu[:, None] - np.array([0.0, 1.0])) ** 2
        chains.append(ChainDraws(log_lik, f"cluster_{k}", mu[:, None], ("mu",)))
    return assemble(chains)


class TestWeightedExpectation:
    def test_uniform_weights_on_equal_clusters_pool_the_draws(self, rng):
        ds = _draw_set(rng, (30, 30), (0.0, 5.0))
        wds = WeightedDrawSet(ds, ChainWeights([0.5, 0.5]))
        pooled = np.concatenate([c.param("mu") for c in ds.chains]).mean()
        assert weighted_expectation(wds, estimand_from_params(ds, "mu")) == pytest.approx(pooled)

    def test_one_hot_weight_picks_one_cluster(self, rng):
        ds = _draw_set(rng, (30, 10), (0.0, 5.0))
        wds = WeightedDrawSet(ds, ChainWeights([0.0, 1.0]))
        value = weighted_expectation(wds, estimand_from_params(ds, "mu"))
        assert value == pytest.approx(ds.chains[1].param("mu").mean())

    def test_unequal_cluster_sizes(self):
        chains = [ChainDraws(np.zeros((2, 1)), "a"), ChainDraws(np.zeros((4, 1)), "b")]
        wds = WeightedDrawSet(assemble(chains), ChainWeights([0.25, 0.75]))
        h = EstimandSeries((np.array([1.0, 3.0]), np.array([0.0, 0.0, 4.0, 4.0])))
        assert weighted_expectation(wds, h) == pytest.approx(0.25 * 2.0 + 0.75 * 2.0)

    def test_series_length_checked(self, rng):
        wds = WeightedDrawSet(_draw_set(rng), ChainWeights([0.5, 0.5]))
        with pytest.raises(DimensionMismatch):
            weighted_expectation(wds, EstimandSeries((np.zeros(20),)))

    def test_linear_in_the_estimand(self, rng):
        ds = _draw_set(rng, (25, 15), (0.0, 4.0))
        wds = WeightedDrawSet(ds, ChainWeights([0.3, 0.7]))
        f = EstimandSeries(tuple(rng.normal(size=c.n_draws) for c in ds.chains))
        g = EstimandSeries(tuple(rng.normal(size=c.n_draws) for c in ds.chains))
        combined = EstimandSeries(tuple(2.5 * a - 4.0 * b for a, b in zip(f.values, g.values)))
        expected = 2.5 * weighted_expectation(wds, f) - 4.0 * weighted_expectation(wds, g)
        assert weighted_expectation(wds, combined) == pytest.approx(expected, rel=1e-12, abs=1e-12)

    def test_order_within_a_cluster_does_not_matter(self, rng):
        ds = _draw_set(rng, (25, 15), (0.0, 4.0))
        wds = WeightedDrawSet(ds, ChainWeights([0.3, 0.7]))
        h = estimand_from_params(ds, "mu")
        shuffled = EstimandSeries(tuple(rng.permutation(v) for v in h.values))
        assert weighted_expectation(wds, shuffled) == pytest.approx(weighted_expectation(wds, h), rel=1e-12)

    def test_weight_count_checked(self, rng):
        with pytest.raises(DimensionMismatch):
            WeightedDrawSet(_draw_set(rng), ChainWeights([1.0]))


class TestAllocation:
    def test_exact_multiples_are_deterministic(self):
        counts, fixed = allocate([0.6, 0.4], 5, np.random.default_rng(0))
        np.testing.assert_array_equal(fixed, [3, 2])
        np.testing.assert_array_equal(counts, [3, 2])

    def test_residual_draw_goes_out_in_proportion(self):
        totals = np.zeros(2)
        trials = 10000
        for seed in range(trials):
            counts, fixed = allocate([0.55, 0.45], 10, np.random.default_rng(seed))
            np.testing.assert_array_equal(fixed, [5, 4])
            assert counts.sum() == 10
            totals += counts
        np.testing.assert_allclose(totals / trials, [5.5, 4.5], atol=0.02)

    def test_no_cluster_gains_more_than_one(self):
        w = np.array([0.31, 0.29, 0.2, 0.2])
        for seed in range(200):
            counts, fixed = allocate(w, 7, np.random.default_rng(seed))
            assert counts.sum() == 7
            assert np.all((counts - fixed >= 0) & (counts - fixed <= 1))


class TestThinning:
    def test_counts_sum_and_indices_are_distinct(self, rng):
        wds = WeightedDrawSet(_draw_set(rng, (20, 30)), ChainWeights([0.3, 0.7]))
        plan = thin_resample(wds, 25, rng_seed=4)
        assert plan.s_thin == 25
        for k, rows in enumerate(plan.indices):
            assert rows.size == plan.counts[k]
            assert np.unique(rows).size == rows.size
            assert np.all(np.diff(rows) > 0)

    def test_bound_violation_names_the_cluster(self, rng):
        wds = WeightedDrawSet(_draw_set(rng, (10, 10)), ChainWeights([0.5, 0.5]))
        thin_resample(wds, 20)
        with pytest.raises(BoundViolation) as info:
            thin_resample(wds, 21)
        assert info.value.details["cluster"] == 0
        assert info.value.details["bound"] == 20
        assert info.value.exit_code == 3

    def test_zero_weight_cluster_contributes_nothing(self, rng):
        wds = WeightedDrawSet(_draw_set(rng, (10, 2)), ChainWeights([1.0, 0.0]))
        plan = thin_resample(wds, 10)
        np.testing.assert_array_equal(plan.counts, [10, 0])
        thinned = materialize(wds, plan)
        assert thinned.n_draws == 10
        np.testing.assert_array_equal(thinned.log_lik, wds.ds.chains[0].log_lik)

    def test_s_thin_must_be_positive(self, rng):
        wds = WeightedDrawSet(_draw_set(rng), ChainWeights([0.5, 0.5]))
        with pytest.raises(DomainError):
            thin_resample(wds, 0)

    def test_same_seed_same_plan(self, rng):
        wds = WeightedDrawSet(_draw_set(rng, (40, 40, 40)), ChainWeights([0.2, 0.3, 0.5]))
        first = thin_resample(wds, 33, rng_seed=9)
        second = thin_resample(wds, 33, rng_seed=9, threads=3)
        np.testing.assert_array_equal(first.counts, second.counts)
        for a, b in zip(first.indices, second.indices):
            np.testing.assert_array_equal(a, b)
        assert first.to_dict() == second.to_dict()

    def test_materialized_mean_is_unbiased(self):
        rng = np.random.default_rng(21)
        ds = _draw_set(rng, (1000, 1000), (0.0, 5.0))
        wds = WeightedDrawSet(ds, ChainWeights([0.3, 0.7]))
        target = weighted_expectation(wds, estimand_from_params(ds, "mu"))
        means = [materialize(wds, thin_resample(wds, 100, rng_seed=seed)).param("mu").mean() for seed in range(200)]
        assert np.mean(means) == pytest.approx(target, abs=4 * 0.1 / np.sqrt(200))

    def test_materialized_rows_come_from_the_plan(self, rng):
        ds = _draw_set(rng, (15, 25))
        wds = WeightedDrawSet(ds, ChainWeights([0.4, 0.6]))
        plan = thin_resample(wds, 10, rng_seed=2)
        thinned = materialize(wds, plan)
        expected = np.concatenate([ds.chains[k].param("mu")[rows] for k, rows in enumerate(plan.indices)])
        np.testing.assert_array_equal(thinned.param("mu"), expected)
