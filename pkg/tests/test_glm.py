import math

import numpy as np
import pytest
from scipy.stats import norm

from cadrescan.dataset import SurveyDataset
from cadrescan.glm import (GlmSpec, RankDeficientError, fit_weighted_glm,
                           linearized_covariance, wald_pvalues)


def survey_data(x, y, weights=None, strata=None, varunits=None, task="cbp"):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    y = np.asarray(y, dtype=float)
    responses = np.column_stack([y, np.zeros(n)]) if task == "cbp" else y[:, None]
    return SurveyDataset(
        features=x,
        responses=responses,
        weights=np.ones(n) if weights is None else np.asarray(weights, float),
        strata=np.ones(n, int) if strata is None else np.asarray(strata),
        varunits=np.arange(n) if varunits is None else np.asarray(varunits),
        column_names=[f"x{j}" for j in range(x.shape[1])],
        response_names=["sbp", "dbp"] if task == "cbp" else ["hyp"],
        task=task,
    )


LINEAR_SPEC = GlmSpec("linear", "sbp", ("x0",))


class TestLinearFit:
    def test_exact_line_recovered(self):
        x = np.array([[0.0], [1.0], [2.0], [3.0]])
        data = survey_data(x, 2.0 * x[:, 0])
        fit = fit_weighted_glm(data, LINEAR_SPEC)
        assert fit.coefficients[0] == pytest.approx(0.0, abs=1e-12)
        assert fit.coefficients[1] == pytest.approx(2.0, abs=1e-12)
        assert np.allclose(fit.covariance, 0.0, atol=1e-20)

    def test_matches_closed_form_weighted_solution(self):
        # five-row dataset with unequal weights; oracle is the explicit
        # normal-equations solution computed with dense inverses
        x = np.array([[1.0], [2.0], [3.0], [4.0], [5.0]])
        y = np.array([1.1, 1.9, 3.2, 3.8, 5.3])
        w = np.array([0.5, 2.0, 1.0, 3.0, 0.7])
        data = survey_data(x, y, weights=w)
        fit = fit_weighted_glm(data, LINEAR_SPEC)
        design = np.column_stack([np.ones(5), x[:, 0]])
        oracle = np.linalg.inv(design.T @ np.diag(w) @ design) @ (
            design.T @ np.diag(w) @ y)
        assert np.allclose(fit.coefficients, oracle, atol=1e-10)

    def test_random_full_rank_matches_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(40, 3))
        y = rng.normal(size=40)
        w = rng.uniform(0.2, 4.0, size=40)
        data = survey_data(x, y, weights=w)
        spec = GlmSpec("linear", "sbp", ("x0", "x1", "x2"))
        fit = fit_weighted_glm(data, spec)
        design = np.column_stack([np.ones(40), x])
        oracle = np.linalg.inv(design.T @ np.diag(w) @ design) @ (
            design.T @ np.diag(w) @ y)
        assert np.allclose(fit.coefficients, oracle, atol=1e-10)

    def test_rank_deficiency_names_columns(self):
        x = np.column_stack([np.arange(6.0), 2.0 * np.arange(6.0)])
        data = survey_data(x, np.arange(6.0))
        spec = GlmSpec("linear", "sbp", ("x0", "x1"))
        with pytest.raises(RankDeficientError, match="x"):
            fit_weighted_glm(data, spec)


class TestLogisticFit:
    def test_symmetric_data_zero_intercept(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(300, 1))
        x = np.vstack([x, -x])  # exact symmetry
        y = np.where(x[:, 0] + rng.normal(scale=2.0, size=600) > 0, 1.0, -1.0)
        # symmetrize labels as well: flip both x and y
        y = np.concatenate([y[:300], -y[:300]])
        data = survey_data(np.vstack([x[:300], -x[:300]]), y, task="hyp")
        spec = GlmSpec("logistic", "hyp", ("x0",))
        fit = fit_weighted_glm(data, spec)
        assert fit.converged
        assert abs(fit.coefficients[0]) < 1e-6

    def test_weighted_score_equations_hold_at_optimum(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(200, 2))
        logits = 0.5 * x[:, 0] - 0.8 * x[:, 1]
        y = np.where(rng.uniform(size=200) < 1 / (1 + np.exp(-logits)), 1.0, -1.0)
        w = rng.uniform(0.3, 3.0, 200)
        data = survey_data(x, y, weights=w, task="hyp")
        spec = GlmSpec("logistic", "hyp", ("x0", "x1"))
        fit = fit_weighted_glm(data, spec)
        assert fit.converged
        design = np.column_stack([np.ones(200), x])
        p = 1 / (1 + np.exp(-design @ fit.coefficients))
        score = design.T @ (w * ((y > 0).astype(float) - p))
        assert np.max(np.abs(score)) < 1e-6

    def test_separated_data_flagged_not_raised(self):
        x = np.concatenate([-np.arange(1.0, 6.0), np.arange(1.0, 6.0)])[:, None]
        y = np.concatenate([-np.ones(5), np.ones(5)])
        data = survey_data(x, y, task="hyp")
        spec = GlmSpec("logistic", "hyp", ("x0",))
        fit = fit_weighted_glm(data, spec)
        assert not fit.converged


class TestLinearizedCovariance:
    def test_matches_textbook_sandwich_when_each_row_is_a_unit(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(60, 2))
        y = x @ np.array([1.0, -2.0]) + rng.normal(size=60)
        data = survey_data(x, y, strata=np.ones(60, int), varunits=np.arange(60))
        spec = GlmSpec("linear", "sbp", ("x0", "x1"))
        fit = fit_weighted_glm(data, spec)
        # independent oracle: classic heteroskedasticity-robust sandwich with
        # the n/(n-1) cluster correction, computed directly
        design = np.column_stack([np.ones(60), x])
        resid = y - design @ fit.coefficients
        bread = np.linalg.inv(design.T @ design)
        meat = np.zeros((3, 3))
        for i in range(60):
            u = resid[i] * design[i]
            meat += np.outer(u, u)
        oracle = bread @ ((60 / 59) * meat) @ bread
        assert np.allclose(fit.covariance, oracle, atol=1e-8)

    def test_zero_residuals_give_zero_covariance(self):
        x = np.arange(8.0)[:, None]
        data = survey_data(x, 3.0 * x[:, 0] + 1.0,
                           strata=np.repeat([1, 2], 4),
                           varunits=np.tile([1, 2], 4))
        fit = fit_weighted_glm(data, LINEAR_SPEC)
        assert np.allclose(fit.covariance, 0.0, atol=1e-20)

    def test_two_strata_two_units_hand_computed(self):
        # 8 observations, 2 strata x 2 variance units, intercept-only model:
        # every score is s_n * residual_n and the covariance reduces to
        # spreadsheet arithmetic over the four unit totals.
        y = np.array([1.0, 2.0, 3.0, 4.0, 10.0, 12.0, 9.0, 11.0])
        w = np.array([1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0])
        strata = np.array([1, 1, 1, 1, 2, 2, 2, 2])
        units = np.array([1, 1, 2, 2, 1, 1, 2, 2])
        data = survey_data(np.zeros((8, 1)), y, weights=w, strata=strata,
                           varunits=units)
        spec = GlmSpec("linear", "sbp", ())
        fit = fit_weighted_glm(data, spec)
        mean = float(np.sum(w * y) / np.sum(w))
        assert fit.coefficients[0] == pytest.approx(mean, abs=1e-12)
        resid = y - mean
        scores = w * resid
        z11 = scores[0] + scores[1]
        z12 = scores[2] + scores[3]
        z21 = scores[4] + scores[5]
        z22 = scores[6] + scores[7]
        contrib1 = 2.0 * ((z11 - (z11 + z12) / 2) ** 2 + (z12 - (z11 + z12) / 2) ** 2)
        contrib2 = 2.0 * ((z21 - (z21 + z22) / 2) ** 2 + (z22 - (z21 + z22) / 2) ** 2)
        a = float(np.sum(w))
        oracle = (contrib1 + contrib2) / a**2
        assert fit.covariance[0, 0] == pytest.approx(oracle, abs=1e-10)

    def test_lonely_stratum_centered_at_grand_mean(self):
        y = np.array([1.0, 3.0, 10.0, 14.0, 5.0])
        strata = np.array([1, 1, 1, 1, 2])  # stratum 2 has one unit
        units = np.array([1, 1, 2, 2, 1])
        data = survey_data(np.zeros((5, 1)), y, strata=strata, varunits=units)
        spec = GlmSpec("linear", "sbp", ())
        fit = fit_weighted_glm(data, spec)
        mean = y.mean()
        scores = y - mean
        z11 = scores[0] + scores[1]
        z12 = scores[2] + scores[3]
        z21 = scores[4]
        grand = (z11 + z12 + z21) / 3.0
        within = 2.0 * ((z11 - (z11 + z12) / 2) ** 2 + (z12 - (z11 + z12) / 2) ** 2)
        lonely = (z21 - grand) ** 2
        oracle = (within + lonely) / 5.0**2
        assert fit.covariance[0, 0] == pytest.approx(oracle, abs=1e-12)

    def test_weight_rescaling_leaves_everything_invariant(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(50, 2))
        y = x @ np.array([1.0, 0.5]) + rng.normal(size=50)
        w = rng.uniform(0.5, 2.0, 50)
        strata = np.repeat(np.arange(5), 10)
        units = np.tile(np.repeat([1, 2], 5), 5)
        spec = GlmSpec("linear", "sbp", ("x0", "x1"))
        fit_a = fit_weighted_glm(survey_data(x, y, w, strata, units), spec)
        fit_b = fit_weighted_glm(survey_data(x, y, 7.3 * w, strata, units), spec)
        assert np.allclose(fit_a.coefficients, fit_b.coefficients, atol=1e-8)
        assert np.allclose(fit_a.covariance, fit_b.covariance, atol=1e-8)

    def test_covariance_is_symmetric_psd(self):
        rng = np.random.default_rng(17)
        x = rng.normal(size=(80, 3))
        y = rng.normal(size=80)
        strata = np.repeat(np.arange(8), 10)
        units = np.tile(np.repeat([1, 2], 5), 8)
        data = survey_data(x, y, rng.uniform(0.5, 2.0, 80), strata, units)
        spec = GlmSpec("linear", "sbp", ("x0", "x1", "x2"))
        fit = fit_weighted_glm(data, spec)
        assert np.allclose(fit.covariance, fit.covariance.T)
        assert np.linalg.eigvalsh(fit.covariance).min() >= -1e-10

    def test_logistic_covariance_matches_direct_formula(self):
        rng = np.random.default_rng(21)
        x = rng.normal(size=(120, 1))
        y = np.where(rng.uniform(size=120) < 1 / (1 + np.exp(-x[:, 0])), 1.0, -1.0)
        w = rng.uniform(0.5, 2.0, 120)
        data = survey_data(x, y, weights=w, task="hyp")
        spec = GlmSpec("logistic", "hyp", ("x0",))
        fit = fit_weighted_glm(data, spec)
        cov = linearized_covariance(data, spec, fit)
        design = np.column_stack([np.ones(120), x])
        p = 1 / (1 + np.exp(-design @ fit.coefficients))
        info = design.T @ np.diag(w * p * (1 - p)) @ design
        scores = (w * ((y > 0) - p))[:, None] * design
        meat = np.zeros((2, 2))
        for u in scores:
            meat += np.outer(u, u)
        oracle = np.linalg.inv(info) @ ((120 / 119) * meat) @ np.linalg.inv(info)
        assert np.allclose(cov, oracle, atol=1e-8)


class TestCadreFilter:
    def test_all_equals_single_cadre(self):
        rng = np.random.default_rng(23)
        x = rng.normal(size=(30, 1))
        y = 2.0 * x[:, 0] + rng.normal(size=30)
        data = survey_data(x, y)
        labels = np.ones(30, dtype=int)
        fit_all = fit_weighted_glm(data, LINEAR_SPEC)
        fit_one = fit_weighted_glm(
            data, GlmSpec("linear", "sbp", ("x0",), cadre_filter=1), labels)
        assert np.array_equal(fit_all.coefficients, fit_one.coefficients)
        assert np.array_equal(fit_all.covariance, fit_one.covariance)

    def test_empty_cadre_rejected(self):
        data = survey_data(np.ones((4, 1)), np.ones(4))
        with pytest.raises(ValueError, match="no subjects"):
            fit_weighted_glm(data, GlmSpec("linear", "sbp", ("x0",), cadre_filter=2),
                             np.ones(4, dtype=int))


class TestWald:
    def make_fit(self, coefficients, std_errors):
        from cadrescan.glm import GlmFit

        coefficients = np.asarray(coefficients, dtype=float)
        std_errors = np.asarray(std_errors, dtype=float)
        return GlmFit(coefficients=coefficients,
                      covariance=np.diag(std_errors**2),
                      std_errors=std_errors,
                      wald_z=np.zeros_like(coefficients),
                      p_values=np.ones_like(coefficients),
                      coef_names=[f"b{i}" for i in range(len(coefficients))],
                      n_obs=40, n_strata=4, n_varunits=12)

    def test_zero_statistic_gives_p_one(self):
        _, p = wald_pvalues(self.make_fit([0.0], [1.0]))
        assert p[0] == 1.0

    def test_quantile_value(self):
        z = 1.959964
        _, p = wald_pvalues(self.make_fit([z], [1.0]))
        assert p[0] == pytest.approx(2 * norm.sf(z), abs=1e-12)
        assert p[0] == pytest.approx(0.05, abs=1e-6)

    def test_sign_symmetry(self):
        _, p = wald_pvalues(self.make_fit([0.7, -0.7], [1.0, 1.0]))
        assert p[0] == p[1]

    def test_zero_standard_error_warns_and_reports_zero(self):
        with pytest.warns(RuntimeWarning, match="degenerate"):
            _, p = wald_pvalues(self.make_fit([0.5], [0.0]))
        assert p[0] == 0.0

    def test_df_correction_widens_p(self):
        fit = self.make_fit([1.5], [1.0])
        _, p_norm = wald_pvalues(fit)
        _, p_t = wald_pvalues(fit, df_correction=True)
        assert p_t[0] > p_norm[0]
