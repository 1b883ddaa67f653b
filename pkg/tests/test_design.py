"""Pair probabilities and design validation.

The SRS formula is checked against exhaustive enumeration of samples;
the Hajek approximation against the exact SRS value and its clamping
bounds.
"""

import itertools

import numpy as np
import pytest

from pairlmm.design import (
    DesignError,
    SurveyDesign,
    hajek_pair_approx,
    pair_probability_srs,
    validate_design,
)


class TestSrsPairProbability:
    def test_census(self):
        assert pair_probability_srs(5, 5) == 1.0

    def test_closed_form(self):
        assert pair_probability_srs(2, 4) == pytest.approx(1.0 / 6.0)

    def test_matches_exhaustive_enumeration(self):
        # joint inclusion frequency of units (0, 1) over all C(N, n) samples
        for n, N in [(3, 10), (2, 6), (4, 9), (5, 12)]:
            hits = total = 0
            for sample in itertools.combinations(range(N), n):
                total += 1
                if 0 in sample and 1 in sample:
                    hits += 1
            assert pair_probability_srs(n, N) == pytest.approx(
                hits / total, rel=1e-12)

    def test_rejects_singletons_and_oversampling(self):
        with pytest.raises(DesignError):
            pair_probability_srs(1, 10)
        with pytest.raises(DesignError):
            pair_probability_srs(5, 4)


class TestHajek:
    def test_certainty_units(self):
        out = hajek_pair_approx(np.ones(3), np.ones(3, dtype=bool))
        assert np.allclose(out, 1.0)

    def test_direct_substitution(self):
        # all pi = 0.5, 4 sampled: 0.25 * (1 - 0.25/2)
        out = hajek_pair_approx(np.full(4, 0.5), np.ones(4, dtype=bool))
        assert out[0, 1] == pytest.approx(0.21875)

    def test_close_to_exact_srs(self):
        n, N = 4, 12
        pi = np.full(N, n / N)
        sampled = np.zeros(N, dtype=bool)
        sampled[:n] = True
        approx = hajek_pair_approx(pi, sampled)[0, 1]
        exact = pair_probability_srs(n, N)
        assert abs(approx - exact) / exact < 0.10

    def test_clamped_to_marginal_minimum(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            s = rng.integers(2, 9)
            pi = rng.uniform(0.01, 1.0, size=s)
            out = hajek_pair_approx(pi, np.ones(s, dtype=bool))
            cap = np.minimum.outer(pi, pi)
            off = ~np.eye(s, dtype=bool)
            assert np.all(out[off] <= cap[off] + 1e-15)
            assert np.all(out[off] > 0)

    def test_rejects_bad_marginals(self):
        with pytest.raises(DesignError):
            hajek_pair_approx(np.array([0.0, 0.5]),
                              np.ones(2, dtype=bool))
        with pytest.raises(DesignError):
            hajek_pair_approx(np.array([0.5]), np.ones(1, dtype=bool))


def toy_design(**overrides):
    base = dict(
        stratum=np.array(["a"] * 6),
        psu=np.array([1, 1, 1, 2, 2, 2]),
        group=np.array([1, 1, 1, 2, 2, 2]),
        p_stage1=np.full(6, 0.5),
        p_stage2=np.full(6, 0.5),
    )
    base.update(overrides)
    return SurveyDesign(**base)


class TestValidateDesign:
    def test_srs_branch_with_population_sizes(self):
        checked = validate_design(
            toy_design(pop_cluster_size=np.full(6, 6.0)))
        assert checked.provenance["srs_exact"] == 2
        expected = pair_probability_srs(3, 6)
        assert checked.pair_prob[0][0, 1] == pytest.approx(expected)

    def test_srs_branch_with_implied_integer_population(self):
        checked = validate_design(toy_design())
        # p2 = 0.5 with 3 sampled implies N = 6
        assert checked.provenance["srs_exact"] == 2

    def test_hajek_branch_on_unequal_probabilities(self):
        p2 = np.array([0.5, 0.4, 0.3, 0.5, 0.5, 0.5])
        checked = validate_design(toy_design(p_stage2=p2))
        assert checked.provenance["hajek"] == 1
        assert checked.provenance["srs_exact"] == 1

    def test_supplied_pair_probabilities_win(self):
        checked = validate_design(
            toy_design(p_pair=np.full(6, 0.2)))
        assert checked.provenance["supplied"] == 2
        assert checked.pair_prob[1][0, 2] == pytest.approx(0.2)

    def test_group_spanning_psus_rejected(self):
        with pytest.raises(DesignError, match="spans"):
            validate_design(toy_design(psu=np.array([1, 1, 2, 2, 2, 2])))

    def test_psu_spanning_strata_rejected(self):
        with pytest.raises(DesignError, match="spans"):
            validate_design(
                toy_design(stratum=np.array(["a", "a", "b", "b", "b", "b"])))

    def test_probability_range_checks(self):
        with pytest.raises(DesignError):
            validate_design(toy_design(p_stage1=np.full(6, 1.5)))
        with pytest.raises(DesignError):
            validate_design(toy_design(p_stage2=np.full(6, 0.0)))

    def test_supplied_pair_probability_above_marginal_rejected(self):
        with pytest.raises(DesignError, match="out of range"):
            validate_design(toy_design(p_pair=np.full(6, 0.9)))

    def test_census_pair_weights_are_one(self):
        checked = validate_design(
            toy_design(p_stage1=np.ones(6), p_stage2=np.ones(6)))
        for mat in checked.pair_prob:
            off = ~np.eye(3, dtype=bool)
            assert np.allclose(mat[off], 1.0)
