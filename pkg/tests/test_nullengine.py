import math
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from src.utils.cluster import label_components
from src.utils.cohort import ScoreVector
from src.utils.correction import cfwer_threshold, cluster_size_threshold
from src.utils.nullengine import (
    CollectSpec,
    PermutationPlan,
    default_k,
    derive_seed,
    generate_permutations,
    kth_largest,
    run_permutation_pass,
    top_k_descending,
)
from src.utils.validation import NullConfigurationError
from src.utils.voxelstats import p_threshold_to_t, voxel_t_map


def _identity_plan(n_subjects: int, n_perms: int = 3, seed: int = 5) -> PermutationPlan:
    plan = generate_permutations(n_subjects, n_perms, seed)
    orders = np.array(plan.orders)
    orders[0] = np.arange(n_subjects)
    return PermutationPlan(seed=seed, n_perms=n_perms, n_subjects=n_subjects, orders=orders)


class TestPermutationPlan:
    def test_single_subject_is_always_identity(self):
        plan = generate_permutations(1, 5, seed=3)
        assert plan.orders.tolist() == [[0]] * 5

    def test_deterministic(self):
        a = generate_permutations(12, 40, seed=99)
        b = generate_permutations(12, 40, seed=99)
        assert np.array_equal(a.orders, b.orders)
        assert not np.array_equal(a.orders, generate_permutations(12, 40, seed=100).orders)

    def test_prefix_stable(self):
        short = generate_permutations(12, 10, seed=4)
        long = generate_permutations(12, 30, seed=4)
        assert np.array_equal(short.orders, long.orders[:10])

    def test_orders_are_permutations(self):
        plan = generate_permutations(9, 50, seed=1)
        for order in plan.orders:
            assert sorted(order.tolist()) == list(range(9))

    def test_uniform_over_three_subjects(self):
        plan = generate_permutations(3, 60000, seed=2026)
        counts = Counter(tuple(order) for order in plan.orders.tolist())
        assert len(counts) == 6
        assert stats.chisquare(list(counts.values())).pvalue > 0.001

    def test_exclude_identity(self):
        plan = generate_permutations(3, 600, seed=8, exclude_identity=True)
        assert not any(order == [0, 1, 2] for order in plan.orders.tolist())

    def test_derive_seed(self):
        assert derive_seed(1, 2) == derive_seed(1, 2)
        assert derive_seed(1, 2) != derive_seed(1, 3)
        assert derive_seed(1, 2, 0) != derive_seed(1, 2)


class TestKthLargest:
    def test_examples(self):
        assert kth_largest([3, 1, 2], 1) == 3
        assert kth_largest([3, 1, 2], 3) == 1
        assert kth_largest([5, 5, 1], 2) == 5

    def test_against_sort(self, rng):
        for _ in range(100):
            values = rng.integers(0, 20, size=int(rng.integers(1, 40))).astype(float)
            k = int(rng.integers(1, values.size + 1))
            assert kth_largest(values, k) == sorted(values, reverse=True)[k - 1]

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            kth_largest([1.0, 2.0], 3)
        with pytest.raises(ValueError):
            kth_largest([1.0, 2.0], 0)

    def test_top_k_descending(self, rng):
        values = rng.normal(size=30)
        assert top_k_descending(values, 5).tolist() == sorted(values, reverse=True)[:5]

    def test_default_k(self):
        assert default_k([1, 10, 100], 5000) == 100
        assert default_k([1, 10, 100], 40) == 40
        assert default_k([], 5000) == 1000


class TestPermutationPass:
    def test_identity_record_matches_observed(self, small_cohort):
        cohort, scores = small_cohort
        plan = _identity_plan(cohort.n_subjects)
        collect = CollectSpec(k=5, p_thresholds=(0.05,))
        null = run_permutation_pass(cohort, scores, plan, collect, show_progress=False)
        observed = voxel_t_map(cohort, scores).t_values
        assert null.record(0).top_t.tolist() == sorted(observed, reverse=True)[:5]

    def test_matches_sequential_recomputation(self, toy_cohort):
        cohort, scores = toy_cohort
        plan = generate_permutations(cohort.n_subjects, 3, seed=17)
        p_thresholds = (0.2, 0.05)
        collect = CollectSpec(k=min(4, cohort.n_voxels), p_thresholds=p_thresholds, connectivity=6)
        null = run_permutation_pass(cohort, scores, plan, collect, show_progress=False)

        for index, order in enumerate(plan.orders):
            t = voxel_t_map(cohort, ScoreVector(scores.values[order])).t_values
            assert null.record(index).top_t.tolist() == pytest.approx(sorted(t, reverse=True)[:collect.k])
            for p in p_thresholds:
                cutoff = p_threshold_to_t(p, cohort.n_subjects - 2)
                labeling = label_components(cohort.mask_index[t > cutoff], cohort.grid, 6)
                assert sorted(null.cluster_sizes_for(p, index).tolist()) == sorted(labeling.sizes.tolist())

    def test_records_are_well_formed(self, small_cohort):
        cohort, scores = small_cohort
        plan = generate_permutations(cohort.n_subjects, 30, seed=3)
        collect = CollectSpec(k=10, p_thresholds=(0.05, 0.01, 0.001))
        null = run_permutation_pass(cohort, scores, plan, collect, show_progress=False)
        assert null.n_perms == 30
        assert null.top_t.shape == (30, 10)
        assert np.all(np.isfinite(null.top_t))
        assert np.all(np.diff(null.top_t, axis=1) <= 0)
        assert np.all(null.max_sizes(0.05) >= null.max_sizes(0.01))
        assert np.all(null.max_sizes(0.01) >= null.max_sizes(0.001))

    def test_cluster_sizes_cover_supra_voxels(self, small_cohort):
        cohort, scores = small_cohort
        plan = generate_permutations(cohort.n_subjects, 10, seed=6)
        collect = CollectSpec(k=3, p_thresholds=(0.1,))
        null = run_permutation_pass(cohort, scores, plan, collect, show_progress=False)
        cutoff = p_threshold_to_t(0.1, cohort.n_subjects - 2)
        for index, order in enumerate(plan.orders):
            t = voxel_t_map(cohort, ScoreVector(scores.values[order])).t_values
            assert null.cluster_sizes_for(0.1, index).sum() == int((t > cutoff).sum())

    def test_worker_count_does_not_change_result(self, small_cohort):
        cohort, scores = small_cohort
        plan = generate_permutations(cohort.n_subjects, 40, seed=12)
        collect = CollectSpec(k=8, p_thresholds=(0.05, 0.01))
        sequential = run_permutation_pass(cohort, scores, plan, collect, workers=1, show_progress=False)
        parallel = run_permutation_pass(cohort, scores, plan, collect, workers=2, show_progress=False)
        assert np.array_equal(sequential.top_t, parallel.top_t)
        for p in collect.p_thresholds:
            assert np.array_equal(sequential.sizes[p], parallel.sizes[p])
            assert np.array_equal(sequential.offsets[p], parallel.offsets[p])

    def test_identity_exclusion_shifts_thresholds_by_one_rank_at_most(self, small_cohort):
        # the two plans differ only in permutation 0, so each threshold moves by at most one rank
        cohort, scores = small_cohort
        collect = CollectSpec(k=5, p_thresholds=(0.05,))
        with_identity = _identity_plan(cohort.n_subjects, n_perms=200, seed=21)
        without = generate_permutations(cohort.n_subjects, 200, seed=21, exclude_identity=True)
        assert np.array_equal(with_identity.orders[1:], without.orders[1:])
        assert not np.array_equal(without.orders[0], np.arange(cohort.n_subjects))

        null_with = run_permutation_pass(cohort, scores, with_identity, collect, show_progress=False)
        null_without = run_permutation_pass(cohort, scores, without, collect, show_progress=False)
        rank = math.ceil(0.95 * 200 - 1e-9) - 1

        for v in (1, 5):
            neighbours = np.sort(null_without.kth_values(v))[rank - 1:rank + 2]
            shifted = cfwer_threshold(null_with, v, 0.05)
            assert neighbours[0] <= shifted <= neighbours[-1]
            assert abs(shifted - cfwer_threshold(null_without, v, 0.05)) <= neighbours[-1] - neighbours[0]

        sizes = np.sort(null_without.max_sizes(0.05))[rank - 1:rank + 2]
        assert sizes[0] <= cluster_size_threshold(null_with, 0.05, "max") <= sizes[-1]

    def test_k_beyond_mask(self, small_cohort):
        cohort, scores = small_cohort
        plan = generate_permutations(cohort.n_subjects, 2, seed=1)
        with pytest.raises(NullConfigurationError):
            run_permutation_pass(cohort, scores, plan, CollectSpec(k=cohort.n_voxels + 1, p_thresholds=(0.05,)),
                                 show_progress=False)

    def test_plan_size_mismatch(self, small_cohort):
        cohort, scores = small_cohort
        plan = generate_permutations(cohort.n_subjects + 1, 2, seed=1)
        with pytest.raises(NullConfigurationError):
            run_permutation_pass(cohort, scores, plan, CollectSpec(k=1, p_thresholds=(0.05,)), show_progress=False)

    def test_uncollected_threshold(self, small_cohort):
        cohort, scores = small_cohort
        plan = generate_permutations(cohort.n_subjects, 2, seed=1)
        null = run_permutation_pass(cohort, scores, plan, CollectSpec(k=1, p_thresholds=(0.05,)),
                                    show_progress=False)
        with pytest.raises(NullConfigurationError):
            null.max_sizes(0.01)
        with pytest.raises(NullConfigurationError):
            null.kth_values(2)
