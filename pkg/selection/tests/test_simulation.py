import math
import unittest

import numpy as np
import pandas as pd
from django.conf import settings
from django.test import SimpleTestCase

from selection.exceptions import DegenerateVariance, DimensionMismatch, InvalidHyper, TooLarge
from selection.services.linmodel import Dataset, Known, ZellnerConfig
from selection.services.pipeline import FitSettings
from selection.services.priors import BlockStructure, MetaCovariates
from selection.services.simulation import (
    BASELINE_OMEGA0,
    HARNESS_SETTINGS,
    ScenarioConfig,
    Truth,
    active_coefficients,
    compute_metrics,
    equicorrelated_normal,
    jackknife_interval,
    loocv,
    loocv_r2,
    rho_X,
    run_scenario,
    simulate_dataset,
    squared_correlation,
    theory_diagnostics,
)
from selection.services.sampler import make_rng
from selection.tests.factories import orthogonal_dataset

FAST = FitSettings(e_step='exact', standardize=False, interval_draws=0)


class ScenarioConfigTests(SimpleTestCase):
    def test_presets(self):
        cfg = ScenarioConfig.preset(4, n_reps=2)
        np.testing.assert_allclose(cfg.omega_true, [BASELINE_OMEGA0, 1.5, 0.0])
        self.assertEqual(cfg.label, 'scenario_4')
        with self.assertRaises(InvalidHyper):
            ScenarioConfig.preset(6)

    def test_default_truth_is_baseline_only(self):
        cfg = ScenarioConfig(q=1)
        np.testing.assert_allclose(cfg.omega_true, [math.log(0.05 / 0.95), 0.0])

    def test_invalid_settings(self):
        with self.assertRaises(InvalidHyper):
            ScenarioConfig(p=0)
        with self.assertRaises(InvalidHyper):
            ScenarioConfig(q=2, omega_true=[0.0, 1.0])
        with self.assertRaises(InvalidHyper):
            ScenarioConfig(x_corr=1.0)


class SimulateDatasetTests(SimpleTestCase):
    def test_active_fraction_follows_baseline(self):
        cfg = ScenarioConfig(n=5, p=4000, q=1)
        _, _, truth = simulate_dataset(cfg, 1)
        rate = truth.gamma_star.mean()
        self.assertAlmostEqual(rate, 0.05, delta=3 * math.sqrt(0.05 * 0.95 / 4000))

    def test_coefficients_span_the_range(self):
        np.testing.assert_allclose(active_coefficients(5, (1 / 3, 2 / 3)), [1 / 3, 5 / 12, 1 / 2, 7 / 12, 2 / 3])
        np.testing.assert_allclose(active_coefficients(1, (1 / 3, 2 / 3)), [0.5])

    def test_shapes_and_truth(self):
        cfg = ScenarioConfig.preset(1, n=30, p=20)
        dataset, meta, truth = simulate_dataset(cfg, 7)
        self.assertEqual(dataset.X.shape, (30, 20))
        self.assertEqual(meta.Z.shape, (20, 3))
        self.assertEqual(meta.names, ('intercept', 'z1', 'z2'))
        np.testing.assert_array_equal(truth.theta_star != 0, truth.gamma_star)

    def test_same_seed_same_replicate(self):
        cfg = ScenarioConfig(n=10, p=6)
        first, second = simulate_dataset(cfg, 3), simulate_dataset(cfg, 3)
        np.testing.assert_array_equal(first[0].X, second[0].X)
        np.testing.assert_array_equal(first[0].y, second[0].y)
        np.testing.assert_array_equal(first[2].gamma_star, second[2].gamma_star)

    def test_equicorrelation(self):
        draws = equicorrelated_normal(make_rng(0), 20000, 3, 0.5)
        corr = np.corrcoef(draws, rowvar=False)
        self.assertAlmostEqual(corr[0, 1], 0.5, delta=0.03)
        self.assertAlmostEqual(draws[:, 2].var(), 1.0, delta=0.05)


class MetricsTests(SimpleTestCase):
    def setUp(self):
        self.truth = Truth([1, 1, 0, 0], [0.5, 0.5, 0.0, 0.0])

    def test_hand_computed(self):
        row = compute_metrics(np.zeros(4), [0.99, 0.2, 0.97, 0.1], self.truth, 0.95, 'm', 2, 's')
        self.assertAlmostEqual(row.mse, 0.5)
        self.assertEqual(row.power, 0.5)
        self.assertEqual(row.fdr, 0.5)
        self.assertEqual((row.method, row.rep, row.scenario), ('m', 2, 's'))

    def test_nothing_selected(self):
        row = compute_metrics(self.truth.theta_star, np.zeros(4), self.truth, 0.95)
        self.assertEqual(row.fdr, 0.0)
        self.assertEqual(row.power, 0.0)
        self.assertEqual(row.mse, 0.0)

    def test_no_active_covariates(self):
        truth = Truth([0, 0], [0.0, 0.0])
        row = compute_metrics(np.zeros(2), [1.0, 0.0], truth, 0.5)
        self.assertEqual(row.power, 0.0)
        self.assertEqual(row.fdr, 1.0)

    def test_lengths_checked(self):
        with self.assertRaises(DimensionMismatch):
            compute_metrics(np.zeros(3), np.zeros(4), self.truth, 0.5)


class RhoTests(SimpleTestCase):
    def test_orthonormal_design(self):
        data = orthogonal_dataset(0, n=20, p=5)
        self.assertAlmostEqual(rho_X(data.X, [True, False, True, False, False]), 1.0, places=10)

    def test_duplicate_of_a_true_covariate(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(15)
        X = np.column_stack([x, rng.standard_normal(15), x])
        self.assertAlmostEqual(rho_X(X, [True, False, False]), 0.0, places=10)

    def test_two_columns_by_hand(self):
        X = np.array([[1.0, 1.0], [1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        # smallest of: eig(X'X/4), x1 residual on x2, x2 residual on x1
        full = np.linalg.eigvalsh(X.T @ X / 4)[0]
        partial = (2.0 - 1.0 / 2.0) / 4
        self.assertAlmostEqual(rho_X(X, [True, True]), min(full, partial), places=12)

    def test_empty_truth(self):
        self.assertEqual(rho_X(np.eye(3), [False, False, False]), math.inf)

    def test_cap(self):
        with self.assertRaises(TooLarge):
            rho_X(np.ones((3, 4)), [True, False, False, False], max_p=3)

    def test_diagnostics_per_block(self):
        data = orthogonal_dataset(2, n=40, p=4)
        truth = Truth([1, 0, 1, 1], [0.5, 0.0, -0.2, 0.4])
        blocks = BlockStructure([0, 0, 1, 1])
        diag = theory_diagnostics(data.X, truth, blocks, np.array([0.5, 0.1]), 1.0)
        np.testing.assert_array_equal(diag.s_per_block, [1, 2])
        np.testing.assert_array_equal(diag.p_per_block, [2, 2])
        np.testing.assert_allclose(diag.theta_min_per_block, [0.5, 0.2])
        self.assertAlmostEqual(diag.kappa_per_block[0], 0.5 * math.log(41), places=12)
        self.assertAlmostEqual(diag.rho, 1.0, places=10)


class RunScenarioTests(SimpleTestCase):
    def setUp(self):
        self.cfg = ScenarioConfig(n=30, p=8, q=1, omega_true=[-1.0, 1.0], n_reps=2, seed=5)

    def test_metrics_table(self):
        result = run_scenario(self.cfg, ['beta_binomial'], FAST)
        frame = result.metrics_frame()
        self.assertEqual(list(frame.columns), ['scenario', 'method', 'rep', 'mse', 'power', 'fdr'])
        self.assertEqual(list(frame['rep']), ['0', '1', 'mean'])
        self.assertAlmostEqual(frame['mse'].iloc[2], frame['mse'].iloc[:2].mean(), places=12)
        self.assertFalse(result.errors)

    def test_reproducible(self):
        first = run_scenario(self.cfg, ['beta_binomial'], FAST).metrics_frame()
        second = run_scenario(self.cfg, ['beta_binomial'], FAST).metrics_frame()
        pd.testing.assert_frame_equal(first, second)

    @unittest.skipUnless(settings.RUN_SLOW_TESTS, 'RUN_SLOW_TESTS is off')
    def test_worker_count_does_not_change_results(self):
        serial = run_scenario(self.cfg, ['beta_binomial'], FAST).metrics_frame()
        parallel = run_scenario(self.cfg, ['beta_binomial'], FAST, n_jobs=2).metrics_frame()
        pd.testing.assert_frame_equal(serial, parallel)

    def test_replicates_are_fitted_unstandardized_by_default(self):
        self.assertFalse(HARNESS_SETTINGS.standardize)
        default = run_scenario(self.cfg, ['beta_binomial']).metrics_frame()
        raw = run_scenario(self.cfg, ['beta_binomial'],
                           FitSettings(standardize=False, interval_draws=0)).metrics_frame()
        pd.testing.assert_frame_equal(default, raw)

    def test_unknown_method(self):
        with self.assertRaises(InvalidHyper):
            run_scenario(self.cfg, ['lasso'], FAST)


class CrossValidationTests(SimpleTestCase):
    def test_squared_correlation(self):
        self.assertAlmostEqual(squared_correlation(np.array([1.0, 2.0, 3.0]), np.array([2.0, 4.0, 6.1])),
                               np.corrcoef([1, 2, 3], [2, 4, 6.1])[0, 1] ** 2, places=12)
        with self.assertRaises(DegenerateVariance):
            squared_correlation(np.array([1.0, 2.0, 3.0]), np.ones(3))

    def test_jackknife_interval(self):
        lo, hi = jackknife_interval(np.array([2.0]), np.array([[1.0], [2.0], [3.0]]))
        half = 1.959963984540054 * math.sqrt(2.0 / 3.0 * 2.0)
        self.assertAlmostEqual(lo[0], 2.0 - half, places=10)
        self.assertAlmostEqual(hi[0], 2.0 + half, places=10)

    def test_strong_signal_is_predicted(self):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((15, 2))
        data = Dataset(3.0 * X[:, 0] + 0.01 * rng.standard_normal(15), X)
        meta = MetaCovariates.intercept_only(2)
        self.assertGreater(loocv_r2(data, meta, 'beta-binomial', FitSettings(e_step='exact', interval_draws=0)),
                           0.99)

    def test_r2_unchanged_by_affine_rescaling_of_y(self):
        rng = np.random.default_rng(6)
        X = rng.standard_normal((20, 3))
        y = 0.8 * X[:, 0] - 0.4 * X[:, 2] + rng.standard_normal(20)
        meta = MetaCovariates.intercept_only(3)
        scale, shift, phi = 7.5, -40.0, 0.9
        base = FitSettings(zellner=ZellnerConfig(1.0, Known(phi)), e_step='exact', interval_draws=0)
        moved = FitSettings(zellner=ZellnerConfig(1.0, Known(phi * scale ** 2)), e_step='exact', interval_draws=0)
        before = loocv_r2(Dataset(y, X), meta, 'beta-binomial', base)
        after = loocv_r2(Dataset(scale * y + shift, X), meta, 'beta-binomial', moved)
        self.assertAlmostEqual(before, after, delta=1e-9)

    def test_pure_noise_is_not_predicted(self):
        rng = np.random.default_rng(7)
        data = Dataset(rng.standard_normal(100), rng.standard_normal((100, 5)))
        r2 = loocv_r2(data, MetaCovariates.intercept_only(5), 'beta-binomial',
                      FitSettings(e_step='exact', interval_draws=0))
        self.assertLess(r2, 0.2)

    def test_omega_methods_get_jackknife_intervals(self):
        rng = np.random.default_rng(5)
        X = rng.standard_normal((8, 3))
        data = Dataset(X[:, 0] + 0.3 * rng.standard_normal(8), X)
        meta = MetaCovariates.from_columns([0.0, 1.0, 1.0])
        cfg = FitSettings(zellner=ZellnerConfig(), e_step='exact', em_iters=5, interval_draws=0)
        result = loocv(data, meta, 'em-exact', cfg, seed=1)
        self.assertEqual(result.fold_omegas.shape, (8, 2))
        self.assertTrue(np.all(result.ci_low <= result.omega_full))
        self.assertTrue(np.all(result.ci_high >= result.omega_full))
        self.assertEqual(result.omega_names, ('intercept', 'z1'))

    def test_too_few_rows(self):
        data = Dataset([1.0, 2.0], [[1.0], [3.0]])
        with self.assertRaises(DimensionMismatch):
            loocv(data, MetaCovariates.intercept_only(1), 'beta-binomial', FAST, 0)
