"""Sandwich, bootstrap, and Rubin combining against independent oracles."""

import numpy as np
import pytest

from pairlmm.data import build_model_frame
from pairlmm.design import SurveyDesign, validate_design
from pairlmm.formula import parse_formula
from pairlmm.inference import (
    VarianceError,
    bootstrap_fit,
    pair_score_beta,
    pair_scores_beta,
    rubin_combine,
    sandwich_beta,
)
from pairlmm.pairwise import enumerate_pairs, fit_pairwise

from test_pairwise import make_dataset


def fitted(rng, **kwargs):
    table, design = make_dataset(rng, **kwargs)
    formula = parse_formula("y ~ x + z + (1 + z | cl)")
    frame = build_model_frame(table, formula)
    checked = validate_design(design)
    pairs = enumerate_pairs(frame, checked)
    fit = fit_pairwise(table, design, formula)
    return table, design, frame, pairs, fit


class TestPairScores:
    def test_zero_residual_pair_has_zero_score(self):
        rng = np.random.default_rng(0)
        _, _, _, pairs, fit = fitted(rng, n_groups=10)
        r = pairs.Y - pairs.X @ fit.beta
        pairs.Y = pairs.Y - r  # force zero residuals everywhere
        U = pair_scores_beta(fit, pairs)
        assert np.max(np.abs(U)) < 1e-12

    def test_matches_finite_differences_of_pair_loglik(self):
        rng = np.random.default_rng(1)
        _, _, frame, pairs, fit = fitted(rng, n_groups=8)
        from pairlmm.kernels import pair_kernel, pair_xi, theta_to_V
        V = theta_to_V(fit.theta)

        def loglik(i, beta):
            xi = pair_xi(V, pairs.Z[i, 0], pairs.Z[i, 1])
            logdet, inv = pair_kernel(xi)
            r = pairs.Y[i] - pairs.X[i] @ beta
            return float(-np.log(2 * np.pi)
                         - 0.5 * (logdet + 2 * np.log(fit.sigma2))
                         - 0.5 * (r @ inv @ r) / fit.sigma2)

        U = pair_scores_beta(fit, pairs)
        h = 1e-6
        for i in (0, 3, 11):
            for a in range(3):
                bp = fit.beta.copy()
                bm = fit.beta.copy()
                bp[a] += h
                bm[a] -= h
                fd = (loglik(i, bp) - loglik(i, bm)) / (2 * h)
                assert fd == pytest.approx(U[i, a], rel=1e-6, abs=1e-8)

    def test_weighted_scores_sum_to_zero_at_fit(self):
        rng = np.random.default_rng(2)
        _, _, _, pairs, fit = fitted(rng, n_groups=15)
        U = pair_scores_beta(fit, pairs)
        total = (pairs.w[:, None] * U).sum(axis=0)
        assert np.max(np.abs(total)) < 1e-8

    def test_single_pair_accessor(self):
        rng = np.random.default_rng(3)
        _, _, _, pairs, fit = fitted(rng, n_groups=6)
        U = pair_scores_beta(fit, pairs)
        assert np.allclose(pair_score_beta(fit, pairs, 4), U[4])


def dense_sandwich(fit, pairs):
    """Textbook cluster-robust sandwich assembled with dense matrices."""
    from pairlmm.kernels import pair_xi, theta_to_V
    V = theta_to_V(fit.theta)
    p = pairs.p
    H = np.zeros((p, p))
    U = np.zeros((pairs.n_pairs, p))
    for i in range(pairs.n_pairs):
        xi = pair_xi(V, pairs.Z[i, 0], pairs.Z[i, 1])
        inv = np.linalg.inv(xi)
        H += pairs.w[i] * pairs.X[i].T @ inv @ pairs.X[i] / fit.sigma2
        r = pairs.Y[i] - pairs.X[i] @ fit.beta
        U[i] = pairs.X[i].T @ inv @ r / fit.sigma2
    n_psu = pairs.stratum_of_psu.shape[0]
    totals = np.zeros((n_psu, p))
    for i in range(pairs.n_pairs):
        totals[pairs.psu_of_pair[i]] += pairs.w[i] * U[i]
    J = np.zeros((p, p))
    for h in np.unique(pairs.stratum_of_psu):
        T = totals[pairs.stratum_of_psu == h]
        n_h = T.shape[0]
        J += n_h / (n_h - 1) * T.T @ T
    Hinv = np.linalg.inv(H)
    return Hinv @ J @ Hinv


class TestSandwich:
    def test_matches_dense_assembly(self):
        rng = np.random.default_rng(4)
        _, _, _, pairs, fit = fitted(rng, n_groups=12)
        ours = sandwich_beta(fit, pairs)
        oracle = dense_sandwich(fit, pairs)
        assert np.max(np.abs(ours.var_beta - oracle)) < 1e-8 * max(
            1.0, np.max(np.abs(oracle)))
        assert ours.df == pairs.stratum_of_psu.shape[0] - 2

    def test_var_beta_is_symmetric_psd(self):
        rng = np.random.default_rng(5)
        _, _, _, pairs, fit = fitted(rng, n_groups=12)
        s = sandwich_beta(fit, pairs)
        assert np.allclose(s.var_beta, s.var_beta.T)
        assert np.min(np.linalg.eigvalsh(s.var_beta)) > -1e-10
        assert np.min(np.linalg.eigvalsh(s.H_hat)) > 0

    def test_psu_duplication_scales_J_by_small_sample_factor(self):
        # duplicating every PSU leaves beta-hat unchanged and rescales
        # each stratum's J by [2n/(2n-1)*2] / [n/(n-1)]
        rng = np.random.default_rng(6)
        table, design, frame, pairs, fit = fitted(rng, n_groups=10)
        n = len(table["y"])
        table2 = {k: np.concatenate([v, v]) for k, v in table.items()}
        table2["cl"] = np.concatenate([table["cl"], table["cl"] + 1000])
        design2 = SurveyDesign(
            stratum=np.concatenate([design.stratum, design.stratum]),
            psu=table2["cl"], group=table2["cl"],
            p_stage1=np.concatenate([design.p_stage1, design.p_stage1]),
            p_stage2=np.concatenate([design.p_stage2, design.p_stage2]),
            pop_cluster_size=np.concatenate([design.pop_cluster_size,
                                             design.pop_cluster_size]),
        )
        formula = parse_formula("y ~ x + z + (1 + z | cl)")
        fit2 = fit_pairwise(table2, design2, formula)
        assert np.max(np.abs(fit2.beta - fit.beta)) < 1e-4

        pairs2 = enumerate_pairs(build_model_frame(table2, formula),
                                 validate_design(design2))
        s1 = sandwich_beta(fit, pairs)
        # evaluate J at the *same* parameter values for exact algebra
        s2 = sandwich_beta(fit, pairs2)
        n_h = 5  # groups per stratum before duplication
        factor = (2 * n_h / (2 * n_h - 1) * 2) / (n_h / (n_h - 1))
        assert np.max(np.abs(s2.J_hat - factor * s1.J_hat)) < 1e-8 * max(
            1.0, np.max(np.abs(s1.J_hat)))

    def test_single_psu_stratum_rejected(self):
        rng = np.random.default_rng(7)
        table, design = make_dataset(rng, n_groups=5, n_strata=5)
        # stratum assignment cl % 5 gives one PSU per stratum
        formula = parse_formula("y ~ x + z + (1 + z | cl)")
        frame = build_model_frame(table, formula)
        pairs = enumerate_pairs(frame, validate_design(design))
        fit = fit_pairwise(table, design, formula)
        with pytest.raises(VarianceError, match="single PSU"):
            sandwich_beta(fit, pairs)

    def test_invariant_to_uniform_weight_rescaling(self):
        rng = np.random.default_rng(8)
        _, _, _, pairs, fit = fitted(rng, n_groups=12)
        base = sandwich_beta(fit, pairs)
        for c in (0.1, 7.0):
            scaled = sandwich_beta(fit, pairs.scaled(c))
            assert np.max(np.abs(scaled.var_beta - base.var_beta)) \
                < 1e-10 * np.max(np.abs(base.var_beta))

    def test_product_form_options_run(self):
        rng = np.random.default_rng(9)
        _, _, _, pairs, fit = fitted(rng, n_groups=12)
        s = sandwich_beta(fit, pairs, h_weights="product",
                          j_weights="product")
        assert np.all(np.isfinite(s.var_beta))


class TestBootstrap:
    def test_minimal_run_reports_two_replicates(self):
        rng = np.random.default_rng(10)
        _, _, _, pairs, fit = fitted(rng, n_groups=10)
        reps = bootstrap_fit(fit, pairs, replicates=2, seed=42)
        assert reps.beta.shape == (2, 3)
        assert reps.n_failed == 0

    def test_identical_psus_give_near_zero_variance(self):
        rng = np.random.default_rng(11)
        table, design = make_dataset(rng, n_groups=2,
                                     sizes=np.array([4, 4]), n_strata=1)
        # make every PSU in each stratum an exact copy of the first
        G = 12
        n = 4
        base_rows = slice(0, n)
        big = {k: np.concatenate([v[base_rows]] * G) for k, v in
               table.items()}
        big["cl"] = np.repeat(np.arange(G), n)
        design = SurveyDesign(
            stratum=np.zeros(G * n, dtype=int), psu=big["cl"],
            group=big["cl"], p_stage1=np.full(G * n, 0.25),
            p_stage2=np.full(G * n, 0.4),
            pop_cluster_size=np.full(G * n, 10.0))
        formula = parse_formula("y ~ x + z + (1 + z | cl)")
        fit = fit_pairwise(big, design, formula)
        pairs = enumerate_pairs(build_model_frame(big, formula),
                                validate_design(design))
        reps = bootstrap_fit(fit, pairs, replicates=20, seed=1)
        se = reps.se()
        assert np.max(se["beta"]) < 1e-6
        assert se["sigma2"] < 1e-6

    def test_multipliers_preserve_stratum_totals_in_expectation(self):
        rng = np.random.default_rng(12)
        _, _, _, pairs, fit = fitted(rng, n_groups=20, n_strata=2)
        reps = bootstrap_fit(fit, pairs, replicates=100, seed=7)
        for h in np.unique(pairs.stratum_of_psu):
            members = pairs.stratum_of_psu == h
            totals = reps.multipliers[:, members].sum(axis=1)
            n_h = int(np.sum(members))
            # n_h - 1 with-replacement draws rescaled by n_h/(n_h-1)
            # reproduce the stratum PSU total exactly, every replicate
            assert np.max(np.abs(totals.mean() - n_h)) < 0.02 * n_h
            assert np.max(np.abs(totals - n_h)) < 1e-12
        mean_mult = reps.multipliers.mean(axis=0)
        assert np.max(np.abs(mean_mult - 1.0)) < 0.5  # per-PSU MC noise

    def test_same_seed_reproduces(self):
        rng = np.random.default_rng(13)
        _, _, _, pairs, fit = fitted(rng, n_groups=10)
        a = bootstrap_fit(fit, pairs, replicates=5, seed=99)
        b = bootstrap_fit(fit, pairs, replicates=5, seed=99)
        assert np.array_equal(a.beta, b.beta)
        assert np.array_equal(a.sigma2, b.sigma2)


def rubin_oracle(est, var):
    """Independently coded combining rules (kept deliberately naive)."""
    est = np.asarray(est, dtype=float)
    var = np.asarray(var, dtype=float)
    M = est.shape[0]
    out_point, out_T, out_df = [], [], []
    for j in range(est.shape[1]):
        q = est[:, j]
        point = sum(q) / M
        W = sum(var[:, j]) / M
        B = sum((qi - point) ** 2 for qi in q) / (M - 1)
        T = W + (1 + 1 / M) * B
        if B > 0:
            df = (M - 1) * (1 + W / ((1 + 1 / M) * B)) ** 2
        else:
            df = float("inf")
        out_point.append(point)
        out_T.append(T)
        out_df.append(df)
    return np.array(out_point), np.array(out_T), np.array(out_df)


class TestRubin:
    def test_identical_fits_have_zero_between_variance(self):
        est = np.tile([1.5, -2.0], (4, 1))
        var = np.tile([0.25, 0.04], (4, 1))
        c = rubin_combine(est, var)
        assert np.allclose(c.between, 0.0)
        assert np.allclose(c.se ** 2, [0.25, 0.04])
        assert np.all(np.isinf(c.df))

    def test_hand_computed_two_fit_case(self):
        c = rubin_combine(np.array([[1.0], [3.0]]), np.array([[1.0], [1.0]]))
        assert c.estimate[0] == pytest.approx(2.0)
        assert c.between[0] == pytest.approx(2.0)
        assert c.se[0] ** 2 == pytest.approx(1.0 + 1.5 * 2.0)

    def test_matches_independent_oracle_on_random_inputs(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            M = int(rng.integers(2, 8))
            P = int(rng.integers(1, 5))
            est = rng.normal(size=(M, P))
            var = rng.uniform(0.01, 2.0, size=(M, P))
            c = rubin_combine(est, var)
            point, T, df = rubin_oracle(est, var)
            assert np.max(np.abs(c.estimate - point)) < 1e-12
            assert np.max(np.abs(c.se ** 2 - T)) < 1e-12
            finite = np.isfinite(df)
            assert np.max(np.abs(c.df[finite] - df[finite])) < 1e-9

    def test_single_fit_rejected(self):
        with pytest.raises(ValueError, match="M >= 2"):
            rubin_combine(np.array([[1.0]]), np.array([[1.0]]))
