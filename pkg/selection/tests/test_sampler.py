import math
import unittest
from unittest import mock

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase
from scipy import linalg

from selection.exceptions import DimensionMismatch, InvalidHyper, TooLarge
from selection.services.linmodel import (
    Dataset,
    InverseGamma,
    Known,
    LogMarginalCache,
    ModelIndicator,
    ZellnerConfig,
    log_marginal,
    mask_key,
)
from selection.services.priors import (
    BetaBinomialPrior,
    FixedBernoulliPrior,
    LogisticMetaPrior,
    MetaCovariates,
    log_model_prior,
)
from selection.services.sampler import (
    GibbsConfig,
    GibbsKernel,
    conditional_inclusion_prob,
    enumerate_log_marginals,
    enumerate_posterior,
    gibbs_sweep,
    make_rng,
    model_masks,
    run_chain,
    spawn_seeds,
)
from selection.tests.factories import random_dataset, random_meta


class GibbsConfigTests(SimpleTestCase):
    def test_default_burn_in(self):
        self.assertEqual(GibbsConfig(200).burn_in, 20)

    def test_invalid_burn_in(self):
        with self.assertRaises(InvalidHyper):
            GibbsConfig(10, burn_in=10)
        with self.assertRaises(InvalidHyper):
            GibbsConfig(0)


class ConditionalUpdateTests(SimpleTestCase):
    def test_single_covariate_odds(self):
        data = Dataset([1.0, -0.5, 2.0], [[1.0], [0.0], [1.0]])
        cfg = ZellnerConfig(1.0, Known(1.0))
        prior = FixedBernoulliPrior.uniform(1)
        prob = conditional_inclusion_prob(ModelIndicator.empty(1), 0, data, prior, cfg)
        c = data.n
        # fitted sum of squares of y on x is (x'y)^2 / x'x = 9 / 2
        log_odds = -0.5 * math.log1p(c) + c / (1 + c) * 4.5 / 2
        self.assertAlmostEqual(prob, 1.0 / (1.0 + math.exp(-log_odds)), places=12)

    def test_symmetric_case_flips_with_probability_one_half(self):
        data = random_dataset(1, n=15, p=2, theta=[0.5, 0.0])
        cfg = ZellnerConfig(1.0, Known(1.0))
        state = ModelIndicator((0,), 2)
        log_in = log_marginal(data, ModelIndicator((0, 1), 2), cfg)
        log_out = log_marginal(data, state, cfg)
        # prior odds chosen to cancel the likelihood ratio exactly
        eps = 1.0 / (1.0 + math.exp(log_in - log_out))
        prior = FixedBernoulliPrior([0.5, eps])
        self.assertAlmostEqual(conditional_inclusion_prob(state, 1, data, prior, cfg), 0.5, places=10)

    def test_vanishing_prior_never_includes(self):
        data = random_dataset(2, n=15, p=3, theta=[1.0, 1.0, 1.0])
        cfg = ZellnerConfig()
        prior = FixedBernoulliPrior.uniform(3, 1e-300)
        result = run_chain(data, prior, cfg, GibbsConfig(50, seed=3))
        np.testing.assert_array_equal(result.pip, np.zeros(3))

    def test_frozen_state_frequencies_match_full_conditional(self):
        data = random_dataset(3, n=12, p=4, theta=[0.4, 0.0, -0.3, 0.0], noise=1.0)
        cfg = ZellnerConfig()
        prior = LogisticMetaPrior(random_meta(3, 4), [0.2, -0.5])
        state = ModelIndicator((0, 3), 4)
        cache = LogMarginalCache()
        rng = make_rng(11)
        draws = 4000
        for j in range(4):
            expected = conditional_inclusion_prob(state, j, data, prior, cfg)
            hits = 0
            for _ in range(draws):
                kernel = GibbsKernel(data, prior, cfg, state, cache)
                kernel.update(j, rng)
                hits += int(kernel.mask[j])
            se = math.sqrt(max(expected * (1 - expected), 1e-4) / draws)
            self.assertAlmostEqual(hits / draws, expected, delta=4 * se)

    def test_kernel_log_odds_match_prior(self):
        data = random_dataset(4, n=10, p=5)
        prior = BetaBinomialPrior(1.0, 1.0)
        state = ModelIndicator((1, 2), 5)
        kernel = GibbsKernel(data, prior, ZellnerConfig(), state)
        for j in range(5):
            on, off = state.mask(), state.mask()
            on[j], off[j] = True, False
            expected = (log_model_prior(prior, ModelIndicator.from_mask(on), 5)
                        - log_model_prior(prior, ModelIndicator.from_mask(off), 5))
            self.assertAlmostEqual(kernel.log_odds(j), expected, places=10)

    def test_duplicate_column_is_never_added_alongside_its_twin(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(20)
        data = Dataset(2 * x + 0.1 * rng.standard_normal(20), np.column_stack([x, x]))
        result = run_chain(data, FixedBernoulliPrior.uniform(2), ZellnerConfig(), GibbsConfig(300, seed=1))
        self.assertNotIn(ModelIndicator((0, 1), 2), result.model_freq)
        self.assertAlmostEqual(result.pip.sum(), 1.0, places=12)

    def test_rejected_flip_leaves_kernel_consistent(self):
        data = random_dataset(23, n=20, p=4, theta=[1.0, 0.0, 2.0, 0.0])
        cfg = ZellnerConfig()
        kernel = GibbsKernel(data, FixedBernoulliPrior.uniform(4), cfg, ModelIndicator((0,), 4))
        kernel.gram.flips_since_refactor = kernel.gram.p - 1
        always = mock.Mock()
        always.random.return_value = 0.0
        with mock.patch.object(linalg, 'cholesky', side_effect=linalg.LinAlgError('singular')):
            kernel.update(2, always)
        np.testing.assert_array_equal(kernel.mask, [True, False, False, False])
        self.assertEqual(kernel.gram.active, [0])
        self.assertAlmostEqual(kernel.current, log_marginal(data, ModelIndicator((0,), 4), cfg), places=9)

        kernel.update(2, always)
        self.assertEqual(sorted(kernel.gram.active), [0, 2])
        self.assertAlmostEqual(kernel.current, log_marginal(data, ModelIndicator((0, 2), 4), cfg), places=9)

    def test_prior_length_checked(self):
        data = random_dataset(5, n=10, p=3)
        with self.assertRaises(DimensionMismatch):
            gibbs_sweep(ModelIndicator.empty(3), data, FixedBernoulliPrior.uniform(4), ZellnerConfig(), None,
                        make_rng(0))


class ChainTests(SimpleTestCase):
    def test_same_seed_same_chain(self):
        data = random_dataset(6, n=30, p=6, theta=[1, 0, 0, -1, 0, 0])
        prior = LogisticMetaPrior(random_meta(6, 6), [-1.0, 0.5])
        first = run_chain(data, prior, ZellnerConfig(), GibbsConfig(120, seed=42))
        second = run_chain(data, prior, ZellnerConfig(), GibbsConfig(120, seed=42), LogMarginalCache())
        np.testing.assert_array_equal(first.pip, second.pip)
        np.testing.assert_array_equal(first.log_post_trace, second.log_post_trace)
        self.assertEqual(first.final_state, second.final_state)

    def test_frequencies_are_consistent(self):
        data = random_dataset(7, n=25, p=5, theta=[1, 0, 0.5, 0, 0])
        result = run_chain(data, FixedBernoulliPrior.uniform(5), ZellnerConfig(), GibbsConfig(200, seed=1))
        self.assertEqual(result.n_kept, 180)
        self.assertAlmostEqual(sum(result.model_freq.values()), 1.0, places=12)
        pip = sum(w * gamma.mask() for gamma, w in result.model_freq.items())
        np.testing.assert_allclose(pip, result.pip, atol=1e-12)
        self.assertTrue(0 <= result.flip_rate <= 1)

    def test_gibbs_pips_close_to_exact(self):
        data = random_dataset(8, n=40, p=5, theta=[1.0, 0.0, 0.6, 0.0, 0.0])
        cfg = ZellnerConfig(1.0, InverseGamma())
        prior = FixedBernoulliPrior.uniform(5)
        exact = enumerate_posterior(data, prior, cfg)
        chain = run_chain(data, prior, cfg, GibbsConfig(3000, seed=9))
        np.testing.assert_allclose(chain.pip, exact.pip, atol=0.06)

    @unittest.skipUnless(settings.RUN_SLOW_TESTS, 'RUN_SLOW_TESTS is off')
    def test_long_chain_pips_close_to_exact(self):
        data = random_dataset(10, n=50, p=8, theta=[1.0, 0.0, 0.5, 0.0, 0.0, -0.4, 0.0, 0.0])
        cfg = ZellnerConfig()
        prior = LogisticMetaPrior(random_meta(10, 8), [-0.5, 0.8])
        exact = enumerate_posterior(data, prior, cfg)
        chain = run_chain(data, prior, cfg, GibbsConfig(50000, seed=13))
        np.testing.assert_allclose(chain.pip, exact.pip, atol=0.02)

    def _mixing_problem(self):
        data = random_dataset(30, n=40, p=6, theta=[0.8, 0.0, 0.4, 0.0, 0.0, 0.3])
        prior = FixedBernoulliPrior.uniform(6)
        return data, prior, ZellnerConfig()

    def test_seeds_and_starting_points_agree(self):
        data, prior, cfg = self._mixing_problem()
        mode = enumerate_posterior(data, prior, cfg).mode()
        first = run_chain(data, prior, cfg, GibbsConfig(3000, seed=1))
        second = run_chain(data, prior, cfg, GibbsConfig(3000, seed=2))
        from_mode = run_chain(data, prior, cfg, GibbsConfig(3000, seed=3, init=mode))
        np.testing.assert_allclose(first.pip, second.pip, atol=0.08)
        np.testing.assert_allclose(first.pip, from_mode.pip, atol=0.08)

    @unittest.skipUnless(settings.RUN_SLOW_TESTS, 'RUN_SLOW_TESTS is off')
    def test_long_chains_from_different_seeds_and_starts_agree(self):
        data, prior, cfg = self._mixing_problem()
        mode = enumerate_posterior(data, prior, cfg).mode()
        first = run_chain(data, prior, cfg, GibbsConfig(40000, seed=11))
        second = run_chain(data, prior, cfg, GibbsConfig(40000, seed=12))
        from_empty = run_chain(data, prior, cfg, GibbsConfig(40000, seed=13, init=ModelIndicator.empty(6)))
        from_mode = run_chain(data, prior, cfg, GibbsConfig(40000, seed=14, init=mode))
        np.testing.assert_allclose(first.pip, second.pip, atol=0.03)
        np.testing.assert_allclose(from_empty.pip, from_mode.pip, atol=0.03)

    def test_spawned_seeds_depend_only_on_parent_and_index(self):
        a = [make_rng(s).random() for s in spawn_seeds(5, 3)]
        b = [make_rng(s).random() for s in spawn_seeds(5, 4)][:3]
        self.assertEqual(a, b)
        self.assertEqual(len(set(a)), 3)


class EnumerationTests(SimpleTestCase):
    def test_bit_order(self):
        masks = model_masks(3)
        self.assertEqual(masks.shape, (8, 3))
        np.testing.assert_array_equal(masks[5], [True, False, True])

    def test_probabilities_sum_to_one_and_give_pips(self):
        data = random_dataset(11, n=20, p=4, theta=[0.8, 0, 0, 0.4])
        post = enumerate_posterior(data, BetaBinomialPrior(), ZellnerConfig())
        self.assertAlmostEqual(post.probs.sum(), 1.0, places=12)
        np.testing.assert_allclose(post.probs @ post.masks, post.pip, atol=1e-12)
        self.assertAlmostEqual(sum(post.model_probs.values()), 1.0, places=12)
        self.assertEqual(post.model_prob(post.mode()), post.probs.max())

    def test_evidence_invariant_to_column_order(self):
        data = random_dataset(12, n=20, p=4, theta=[0.8, 0, 0.3, 0])
        perm = [2, 0, 3, 1]
        shuffled = Dataset(data.y, data.X[:, perm])
        probs = np.array([0.1, 0.3, 0.5, 0.7])
        first = enumerate_posterior(data, FixedBernoulliPrior(probs), ZellnerConfig())
        second = enumerate_posterior(shuffled, FixedBernoulliPrior(probs[perm]), ZellnerConfig())
        self.assertAlmostEqual(first.log_evidence, second.log_evidence,
                               delta=1e-12 * max(1.0, abs(first.log_evidence)))
        np.testing.assert_allclose(first.pip[perm], second.pip, rtol=0, atol=1e-10)

        original = enumerate_log_marginals(data, ZellnerConfig())
        permuted = enumerate_log_marginals(shuffled, ZellnerConfig())
        by_model = {mask_key(m[perm]): v for m, v in zip(original.masks, original.log_marginals)}
        for mask, value in zip(permuted.masks, permuted.log_marginals):
            reference = by_model[mask_key(mask)]
            self.assertAlmostEqual(value, reference, delta=1e-12 * max(1.0, abs(reference)))

    def test_fixed_bernoulli_equals_intercept_only_logistic(self):
        data = random_dataset(13, n=20, p=3)
        eps = 0.3
        fixed = enumerate_posterior(data, FixedBernoulliPrior.uniform(3, eps), ZellnerConfig())
        logistic = enumerate_posterior(
            data, LogisticMetaPrior(MetaCovariates.intercept_only(3), [math.log(eps / (1 - eps))]), ZellnerConfig()
        )
        self.assertAlmostEqual(fixed.log_evidence, logistic.log_evidence, places=10)
        np.testing.assert_allclose(fixed.probs, logistic.probs, rtol=1e-9)

    def test_rank_deficient_models_get_no_mass(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal(12)
        data = Dataset(x + rng.standard_normal(12), np.column_stack([x, rng.standard_normal(12), x]))
        table = enumerate_log_marginals(data, ZellnerConfig())
        both = table.masks[:, 0] & table.masks[:, 2]
        self.assertTrue(np.all(np.isneginf(table.log_marginals[both])))
        post = enumerate_posterior(data, FixedBernoulliPrior.uniform(3), ZellnerConfig())
        self.assertTrue(np.all(post.probs[both] == 0))
        self.assertAlmostEqual(post.probs.sum(), 1.0, places=12)

    def test_duplicate_columns_share_inclusion(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal(20)
        data = Dataset(x + 0.5 * rng.standard_normal(20), np.column_stack([x, x, rng.standard_normal(20)]))
        post = enumerate_posterior(data, FixedBernoulliPrior.uniform(3), ZellnerConfig())
        self.assertAlmostEqual(post.pip[0], post.pip[1], places=10)

    def test_too_many_covariates(self):
        data = random_dataset(16, n=30, p=6)
        with self.assertRaises(TooLarge):
            enumerate_log_marginals(data, ZellnerConfig(), max_p=5)
