import math

import numpy as np
import pytest
from scipy import stats

from src.models import CorrectionConfig
from src.utils.correction import (
    REFERENCE_ROWS,
    apply_cluster_correction,
    apply_fdr,
    apply_t_threshold,
    cfwer_threshold,
    cluster_size_threshold,
    compare_cfwer_fdr,
    effective_q,
    fdr_threshold,
    format_percent,
    percentile_threshold,
)
from src.utils.validation import InputValidationError, NullConfigurationError
from src.utils.voxelstats import PValueMap, StatMap
from src.utils.volume import Grid
from tests.conftest import make_null


def _stat_map(t_values, df=10, dims=None):
    t_values = np.asarray(t_values, dtype=float)
    grid = Grid(dims or (t_values.size, 1, 1))
    return StatMap(t_values=t_values, df=df, mask_index=np.arange(t_values.size), grid=grid)


def _random_null(rng, n_perms=20, k=5):
    return make_null(-np.sort(-rng.normal(3.0, 1.0, size=(n_perms, k)), axis=1))


def _bh_by_definition(p_values, q):
    """Largest cutoff c drawn from the p-values with c <= q * #{p <= c} / m"""
    m = len(p_values)
    best = None
    for c in p_values:
        if c <= q * sum(p <= c for p in p_values) / m and (best is None or c > best):
            best = c
    return set() if best is None else {i for i, p in enumerate(p_values) if p <= best}


class TestPercentile:
    def test_rank(self):
        assert percentile_threshold(range(1, 21), 0.05) == 19

    def test_constant(self):
        assert percentile_threshold([4.2] * 30, 0.05) == 4.2

    def test_uniform(self):
        values = np.random.default_rng(1).random(1000)
        assert 0.93 <= percentile_threshold(values, 0.05) <= 0.97

    def test_at_most_alpha_share_exceeds(self, rng):
        for n in (7, 20, 99, 500):
            values = rng.normal(size=n)
            threshold = percentile_threshold(values, 0.05)
            assert np.sum(values > threshold) <= math.floor(0.05 * n)

    def test_empty(self):
        with pytest.raises(InputValidationError):
            percentile_threshold([], 0.05)


class TestClusterThresholds:
    def test_max_variant(self):
        null = make_null(np.zeros(20), {0.01: [[s, 1] for s in range(1, 21)]})
        assert cluster_size_threshold(null, 0.01, "max") == 19

    def test_no_clusters(self):
        null = make_null(np.zeros(10), {0.01: [[] for _ in range(10)]})
        assert cluster_size_threshold(null, 0.01, "max") == 0
        assert cluster_size_threshold(null, 0.01, "all") == 0

    def test_all_never_exceeds_max(self, rng):
        for _ in range(20):
            per_perm = [list(rng.geometric(0.3, size=int(rng.integers(1, 9)))) for _ in range(200)]
            null = make_null(np.zeros(200), {0.01: per_perm})
            assert cluster_size_threshold(null, 0.01, "all") <= cluster_size_threshold(null, 0.01, "max")

    def test_uncollected_threshold(self):
        null = make_null(np.zeros(5), {0.01: [[1]] * 5})
        with pytest.raises(NullConfigurationError):
            cluster_size_threshold(null, 0.001, "max")

    def test_unknown_variant(self):
        null = make_null(np.zeros(5), {0.01: [[1]] * 5})
        with pytest.raises(InputValidationError):
            cluster_size_threshold(null, 0.01, "median")


class TestClusterCorrection:
    @pytest.fixture
    def two_blobs(self):
        grid = Grid((20, 20, 20))
        t = np.zeros(grid.dims)
        t[1:6, 1:7, 1:5] = 10.0    # 120 voxels
        t[12:17, 12:16, 12:14] = 10.0    # 40 voxels
        return StatMap(t_values=grid.flatten(t), df=50, mask_index=np.arange(grid.n_voxels), grid=grid)

    def test_small_cluster_removed(self, two_blobs):
        result = apply_cluster_correction(two_blobs, 0.001, size_threshold=100)
        assert result.method == "cluster-max"
        assert result.n_supra == 120
        assert result.parameters["n_clusters_observed"] == 2
        assert result.parameters["n_clusters_retained"] == 1

    def test_zero_threshold_keeps_everything(self, two_blobs):
        result = apply_cluster_correction(two_blobs, 0.001, size_threshold=0, variant="all")
        assert result.method == "cluster-all"
        assert result.n_supra == 160

    def test_threshold_is_strict(self, two_blobs):
        assert apply_cluster_correction(two_blobs, 0.001, size_threshold=120).n_supra == 0


class TestCfwer:
    def test_v1_is_max_statistic(self, rng):
        for _ in range(20):
            null = _random_null(rng)
            maxima = sorted(null.top_t[:, 0])
            expected = maxima[math.ceil(0.95 * len(maxima) - 1e-9) - 1]
            assert cfwer_threshold(null, 1, 0.05) == expected

    def test_hand_listed_null(self):
        top = np.array([[float(20 - i), float(10 - i / 2)] for i in range(20)])
        null = make_null(top)
        assert cfwer_threshold(null, 1, 0.05) == 19.0
        assert cfwer_threshold(null, 2, 0.05) == 9.5

    def test_non_increasing_in_v(self, rng):
        for _ in range(20):
            null = _random_null(rng, n_perms=50, k=8)
            thresholds = [cfwer_threshold(null, v, 0.05) for v in range(1, 9)]
            assert all(b <= a for a, b in zip(thresholds, thresholds[1:]))

    def test_self_consistent(self, rng):
        null = _random_null(rng, n_perms=200, k=4)
        for v in range(1, 5):
            threshold = cfwer_threshold(null, v, 0.05)
            assert np.sum(null.kth_values(v) > threshold) <= math.floor(0.05 * 200)

    def test_v_beyond_k(self, rng):
        with pytest.raises(NullConfigurationError):
            cfwer_threshold(_random_null(rng, k=3), 4)

    def test_apply_threshold(self, rng):
        observed = _stat_map(rng.normal(size=50))
        assert apply_t_threshold(observed, 100.0).n_supra == 0
        assert apply_t_threshold(observed, -100.0).n_supra == 50
        threshold = float(np.median(observed.t_values))
        result = apply_t_threshold(observed, threshold, parameters={"v": 5})
        assert result.supra_indices == [i for i, t in enumerate(observed.t_values) if t > threshold]
        assert result.effective_q == 5 / result.n_supra

    def test_ties_excluded(self):
        result = apply_t_threshold(_stat_map([1.0, 2.0, 2.0, 3.0]), 2.0)
        assert result.supra_indices == [3]


class TestEffectiveQ:
    def test_values(self):
        assert effective_q(10, 500) == 0.02
        assert effective_q(1, 1) == 1.0
        assert effective_q(3, 0) is None

    def test_percent(self):
        assert format_percent(100 / 1527) == "6.5%"
        assert format_percent(None) == "n/a"

    def test_reference_rows_are_flagged(self):
        assert REFERENCE_ROWS
        assert all(row.reference for row in REFERENCE_ROWS)


class TestFdr:
    def test_nothing_rejected(self):
        result = fdr_threshold(PValueMap(np.ones(10)), 0.05, df=10)
        assert result.p_crit is None
        assert result.t_crit is None
        assert result.n_supra == 0

    def test_three_p_values(self):
        result = fdr_threshold(PValueMap(np.array([0.01, 0.02, 0.30])), 0.05, df=10)
        assert result.n_supra == 2
        assert result.p_crit == 0.02
        assert result.t_crit == pytest.approx(stats.t.isf(0.02, 10))

    def test_matches_definition(self, rng):
        for _ in range(200):
            m = int(rng.integers(1, 40))
            p_values = np.where(rng.random(m) < 0.3, rng.random(m) * 0.01, rng.random(m))
            q = float(rng.choice([0.01, 0.05, 0.1, 0.2]))
            result = fdr_threshold(PValueMap(p_values), q, df=20)
            assert set(np.flatnonzero(result.supra).tolist()) == _bh_by_definition(p_values.tolist(), q)

    def test_arbitrary_dependency_is_more_conservative(self, rng):
        for _ in range(50):
            p_values = rng.random(60) ** 3
            independent = fdr_threshold(PValueMap(p_values), 0.05, df=20)
            arbitrary = fdr_threshold(PValueMap(p_values), 0.05, df=20, dependency="arbitrary")
            assert arbitrary.n_supra <= independent.n_supra

    def test_bad_q(self):
        with pytest.raises(InputValidationError):
            fdr_threshold(PValueMap(np.array([0.1])), 1.0, df=3)

    def test_apply_fdr(self):
        observed = _stat_map([8.0, 6.0, 0.0, -1.0], df=20)
        result = apply_fdr(observed, 0.05)
        assert result.method == "fdr"
        assert result.supra_indices == [0, 1]


OBSERVED = [5.0, 4.5, 3.0, 1.0, 0.5, 0.1]


class TestCompare:
    def test_hand_calculation(self):
        observed = _stat_map(OBSERVED, df=10)
        top = -np.sort(-np.column_stack([
            np.linspace(2.0, 4.4, 20), np.linspace(0.5, 2.4, 20), np.linspace(0.0, 0.95, 20),
        ]), axis=1)
        null = make_null(top)
        rows = compare_cfwer_fdr(observed, null, CorrectionConfig(v_list=[1, 2, 3], alpha=0.05))
        assert [row.v for row in rows] == [1, 2, 3]

        p_values = stats.t.sf(OBSERVED, 10)
        for row in rows:
            t_cfwer = sorted(null.top_t[:, row.v - 1])[18]
            n_supra = sum(t > t_cfwer for t in OBSERVED)
            assert row.t_cfwer == t_cfwer
            assert row.n_supra_cfwer == n_supra
            q = row.v / n_supra
            assert q < 1
            assert row.effective_q == pytest.approx(q)
            assert row.n_supra_fdr == len(_bh_by_definition(p_values.tolist(), q))

    def test_dominating_null(self):
        observed = _stat_map([1.0, 0.5, 0.2], df=10)
        null = make_null(np.full((20, 3), 50.0))
        rows = compare_cfwer_fdr(observed, null, CorrectionConfig(v_list=[1, 2], alpha=0.05))
        assert len(rows) == 2
        assert all(row.n_supra_cfwer == 0 and row.effective_q is None for row in rows)
        assert all(row.note == "no supra-threshold voxels" for row in rows)

    def test_v_beyond_k(self):
        observed = _stat_map([5.0, 3.0, 1.0], df=10)
        rows = compare_cfwer_fdr(observed, make_null(np.full((20, 2), 1.0)), CorrectionConfig(v_list=[1, 10]))
        assert rows[1].t_cfwer is None
        assert "exceeds" in rows[1].note
