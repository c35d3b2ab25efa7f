import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairsite.metrics import (
    RewardConfig,
    cohort_distribution,
    entropy,
    fairness_entropy,
    ndcg,
    population_distribution,
    population_entropy,
    ranking_reward,
    relative_error,
    reward,
    utility,
)

from conftest import make_instance

# Multiple-sclerosis case study: site race mix (percent) and enrollment.
CASE_SITES = {
    "Tacoma": ([60.0, 10.9, 14.5, 5.2, 7.8, 1.6], 16),
    "Fort Lauderdale": ([29.5, 25.2, 39.4, 4.0, 1.8, 0.1], 14),
    "San Antonio": ([53.4, 30.8, 5.2, 8.3, 1.6, 0.6], 12),
    "Oklahoma City": ([42.0, 3.0, 36.1, 10.6, 6.4, 1.9], 11),
    "Tucson": ([77.7, 12.4, 1.4, 5.7, 1.8, 1.1], 11),
    "Knoxville": ([88.2, 2.4, 2.3, 4.1, 2.6, 0.4], 10),
    "Cleveland": ([40.9, 2.5, 44.7, 9.5, 2.3, 0.2], 8),
}
BASELINE_PICK = ["Fort Lauderdale", "San Antonio", "Oklahoma City", "Tucson", "Knoxville"]
FAIR_PICK = ["Tacoma", "Fort Lauderdale", "San Antonio", "Oklahoma City", "Cleveland"]


def case_study_instance():
    names = list(CASE_SITES)
    return names, make_instance([CASE_SITES[n][1] for n in names], [CASE_SITES[n][0] for n in names], K=5)


class TestEntropy:
    def test_uniform_is_log6(self):
        assert entropy(np.full(6, 1 / 6)) == pytest.approx(math.log(6), abs=1e-12)

    def test_point_mass_is_zero(self):
        assert entropy([0, 1, 0, 0, 0, 0]) == 0.0

    def test_zero_log_zero(self):
        assert entropy([0.5, 0.5, 0, 0, 0, 0]) == pytest.approx(math.log(2))

    def test_published_distributions(self):
        assert entropy([0.561, 0.158, 0.181, 0.065, 0.028, 0.007]) == pytest.approx(1.240, abs=0.005)
        assert entropy([0.459, 0.155, 0.262, 0.070, 0.042, 0.009]) == pytest.approx(1.362, abs=0.005)


class TestCaseStudy:
    def test_baseline_cohort_mix_and_entropy(self):
        names, inst = case_study_instance()
        chosen = [names.index(n) for n in BASELINE_PICK]
        dist = population_distribution(chosen, inst)
        np.testing.assert_allclose(dist, [0.561, 0.158, 0.181, 0.065, 0.028, 0.007], atol=1.5e-3)
        assert population_entropy(chosen, inst) == pytest.approx(1.240, abs=0.005)

    def test_fair_cohort_mix_and_entropy(self):
        names, inst = case_study_instance()
        chosen = [names.index(n) for n in FAIR_PICK]
        dist = population_distribution(chosen, inst)
        np.testing.assert_allclose(dist, [0.459, 0.155, 0.262, 0.070, 0.042, 0.009], atol=1.5e-3)
        assert population_entropy(chosen, inst) == pytest.approx(1.362, abs=0.005)

    def test_fair_pick_enrolls_more(self):
        names, inst = case_study_instance()
        e = inst.enrollments
        assert e[[names.index(n) for n in FAIR_PICK]].sum() > e[[names.index(n) for n in BASELINE_PICK]].sum()


class TestUtility:
    def test_all_enrollment_in_top(self):
        assert utility([5, 3, 0, 0], 2) == 1.0

    def test_none_in_top(self):
        assert utility([0, 0, 4, 1], 2) == -1.0

    def test_zero_total(self):
        assert utility([0, 0, 0], 1) == 0.0

    def test_value(self):
        assert utility([10, 8, 5, 7], 2) == pytest.approx((18 - 12) / 30)

    def test_negative_enrollment_rejected(self):
        with pytest.raises(ValueError):
            utility([1, -1], 1)


class TestReward:
    def test_lambda_zero_is_utility(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            e = rng.integers(0, 20, 6)
            races = rng.dirichlet(np.ones(6), 6)
            assert reward(e, races, 3, RewardConfig(0.0)).R == utility(e, 3)

    def test_components(self):
        e = [4, 4, 1]
        races = [[1, 0, 0, 0, 0, 0], [0, 1, 0, 0, 0, 0], [0, 0, 1, 0, 0, 0]]
        out = reward(e, races, 2, RewardConfig(2.0))
        assert out.F == pytest.approx(math.log(2))
        assert out.R == pytest.approx(out.U + 2.0 * math.log(2))

    def test_zero_enrollment_top_gives_zero_fairness(self):
        assert fairness_entropy([0, 0, 3], np.eye(6)[:3], 2) == 0.0

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            RewardConfig(-0.1)

    def test_ranking_reward_uses_order(self):
        inst = make_instance([1, 9, 0, 2, 5], K=2)
        assert ranking_reward(inst, [1, 4, 0, 2, 3], RewardConfig()).U == pytest.approx((14 - 3) / 17)

    def test_cohort_rejects_non_distribution(self):
        with pytest.raises(ValueError):
            cohort_distribution([1, 1], [[0.5, 0.6, 0, 0, 0, 0], [1, 0, 0, 0, 0, 0]])


class TestRelativeError:
    def test_optimal_selection(self):
        inst = make_instance([3, 9, 4, 1, 0], K=2)
        assert relative_error([1, 2], inst) == 0.0

    def test_value(self):
        inst = make_instance([3, 9, 4, 1, 0], K=2)
        assert relative_error([0, 3], inst) == pytest.approx((13 - 4) / 13)

    def test_zero_ceiling(self):
        inst = make_instance([0, 0, 0], K=2)
        assert relative_error([0, 1], inst) == 0.0


def brute_ndcg(m, o, K):
    """Straight transcription: gains 2^e - 1 discounted by log2(rank + 1)."""
    dcg = sum((2 ** m[i] - 1) / math.log2(i + 2) for i in range(K))
    idcg = sum((2 ** o[i] - 1) / math.log2(i + 2) for i in range(K))
    return dcg / idcg


class TestNDCG:
    def test_worked_example(self):
        assert ndcg([10, 8, 5, 7], 4) == pytest.approx(0.9947213060082276, abs=1e-12)
        assert ndcg([10, 8, 5, 7], 4) == pytest.approx(brute_ndcg([10, 8, 5, 7], [10, 8, 7, 5], 4), abs=1e-12)

    def test_perfect_order(self):
        assert ndcg([9, 4, 2, 1], 2) == 1.0

    def test_against_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            m = rng.integers(0, 15, 8).astype(float)
            K = int(rng.integers(1, 9))
            o = np.sort(m)[::-1]
            if o[:K].sum() == 0:
                continue
            assert ndcg(m, K) == pytest.approx(brute_ndcg(m, o, K), rel=1e-12)

    def test_one_only_for_optimal_prefix(self):
        assert ndcg([7, 7, 5, 1], 2) == 1.0
        assert ndcg([7, 5, 7, 1], 2) < 1.0
        assert ndcg([7, 5, 7, 1], 1) == 1.0

    def test_all_zero(self):
        assert ndcg([0, 0, 0], 2) == 1.0

    def test_in_unit_interval(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            m = rng.integers(0, 30, 6)
            v = ndcg(m, 3)
            assert 0.0 <= v <= 1.0

    def test_exponent_cap_warns(self):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            value = ndcg([100, 1], 1)
        assert any("capped" in str(w.message) for w in caught)
        assert value == 1.0


race_rows = st.lists(st.floats(0.0, 1.0), min_size=6, max_size=6).filter(lambda r: sum(r) > 1e-3).map(
    lambda r: [x / sum(r) for x in r])


class TestRewardProperties:
    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 50), min_size=2, max_size=12), st.data())
    def test_bounds(self, enrollments, data):
        K = data.draw(st.integers(1, len(enrollments)))
        races = data.draw(st.lists(race_rows, min_size=len(enrollments), max_size=len(enrollments)))
        lam = data.draw(st.floats(0.0, 10.0))
        out = reward(enrollments, races, K, RewardConfig(lam))
        assert -1.0 <= out.U <= 1.0
        assert 0.0 <= out.F <= math.log(6) + 1e-12
        assert out.R == pytest.approx(out.U + lam * out.F)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 40), min_size=1, max_size=10), st.data())
    def test_ndcg_unit_interval(self, enrollments, data):
        K = data.draw(st.integers(1, len(enrollments)))
        perm = data.draw(st.permutations(enrollments))
        assert 0.0 <= ndcg(perm, K) <= 1.0 + 1e-12
