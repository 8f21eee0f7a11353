import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from common.exceptions import ConfigurationError, OffPolicyBatchError, UndefinedRatioError
from rewards.services import GroupBatch
from .services import (
    SurrogateConfig, action_prob, clipped_term, clipped_term_slope, group_objective,
    importance_ratio, merge_gradients, objective_gradient, on_policy_advantage_gradient,
    pspo_term, pspo_term_slope, ratio_statistics, smooth_prob, smoothed_ratio,
    state_surrogate, state_surrogate_gradient, surrogate_slope,
)
from .tabular import StateKey, TabularPolicy, softmax

ROOT = StateKey(0)


def two_arm_batch(advantages=(1.0, 1.0)):
    """Old policy uniform over two actions; one completion per action."""
    return GroupBatch(
        prompt_id=0,
        completions=((0,), (1,)),
        old_logprobs=(np.log([0.5]), np.log([0.5])),
        rewards=np.array(advantages),
        advantages=np.array(advantages),
    )


def two_arm_policies():
    old = TabularPolicy(2)
    cur = TabularPolicy(2, {ROOT: [math.log(3.0), 0.0]})
    return cur, old


class TabularPolicyTests(SimpleTestCase):
    def test_uniform_logits_give_uniform_probabilities(self):
        policy = TabularPolicy(4)
        for action in range(4):
            self.assertAlmostEqual(action_prob(policy, StateKey(7, (1, 2)), action), 0.25, places=15)

    def test_log_three_logit_halves_the_mass(self):
        policy = TabularPolicy(4, {ROOT: [math.log(3.0), 0.0, 0.0, 0.0]})
        self.assertAlmostEqual(action_prob(policy, ROOT, 0), 0.5, places=15)

    def test_extreme_logits_stay_inside_the_open_interval(self):
        policy = TabularPolicy(2, {ROOT: [10.0, -10.0]})
        p = action_prob(policy, ROOT, 0)
        self.assertGreater(p, 1 - 1e-8)
        self.assertLess(p, 1.0)
        self.assertGreater(action_prob(policy, ROOT, 1), 0.0)

    def test_action_outside_vocabulary_is_rejected(self):
        with self.assertRaises(ValueError):
            action_prob(TabularPolicy(3), ROOT, 3)

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            self.assertAlmostEqual(float(softmax(rng.normal(scale=20, size=13)).sum()), 1.0, delta=1e-12)

    def test_reads_do_not_create_states(self):
        policy = TabularPolicy(3)
        policy.probs(StateKey(1, (2,)))
        self.assertEqual(len(policy), 0)

    def test_snapshot_is_independent(self):
        policy = TabularPolicy(3, {ROOT: [1.0, 2.0, 3.0]})
        frozen = policy.snapshot()
        policy.add_to_logits(ROOT, np.ones(3))
        assert_allclose(frozen.logits(ROOT), [1.0, 2.0, 3.0])
        self.assertFalse(policy.same_parameters(frozen))

    def test_set_logits_checks_shape(self):
        with self.assertRaises(ValueError):
            TabularPolicy(3).set_logits(ROOT, [0.0, 1.0])

    def test_state_key_encoding_round_trips(self):
        key = StateKey(42, (10, 11, 3))
        self.assertEqual(StateKey.decode(key.encode()), key)
        self.assertEqual(StateKey.decode(StateKey(5).encode()), StateKey(5))

    def test_policy_table_save_and_load(self):
        policy = TabularPolicy(13, {StateKey(3, (1,)): np.linspace(-1, 1, 13), StateKey(0): np.full(13, 0.1)})
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'policy.tsv'
            policy.save(path)
            loaded = TabularPolicy.load(path)
        self.assertEqual(loaded.vocab_size, 13)
        self.assertTrue(loaded.same_parameters(policy))


class ScalarTermTests(SimpleTestCase):
    def test_smooth_prob(self):
        self.assertAlmostEqual(smooth_prob(0.9, 0.5, 0.1), 0.86, places=15)
        self.assertEqual(smooth_prob(0.3, 0.7, 0.0), 0.3)
        self.assertEqual(smooth_prob(0.3, 0.7, 1.0), 0.7)
        with self.assertRaises(ValueError):
            smooth_prob(0.3, 0.7, 1.5)

    def test_importance_ratio(self):
        self.assertAlmostEqual(importance_ratio(0.6, 0.3), 2.0, places=15)
        self.assertEqual(importance_ratio(0.4, 0.4), 1.0)
        self.assertEqual(importance_ratio(0.0, 0.5), 0.0)
        with self.assertRaises(UndefinedRatioError):
            importance_ratio(0.2, 0.0)

    def test_smoothed_ratio(self):
        self.assertAlmostEqual(smoothed_ratio(1.5, 0.2), 1.4, places=15)
        self.assertEqual(smoothed_ratio(2.5, 0.0), 2.5)
        self.assertAlmostEqual(smoothed_ratio(0.0, 0.1), 0.1, places=15)

    def test_clipped_term(self):
        self.assertAlmostEqual(float(clipped_term(1.3, 1.0, 0.2)), 1.2, places=15)
        self.assertAlmostEqual(float(clipped_term(0.5, -1.0, 0.2)), -0.8, places=15)
        for advantage in (-2.0, 0.5, 3.0):
            self.assertEqual(float(clipped_term(1.0, advantage, 0.1)), advantage)

    def test_clipped_slope_is_flat_outside_the_range(self):
        self.assertEqual(clipped_term_slope(1.3, 1.0, 0.2), 0.0)
        self.assertEqual(clipped_term_slope(0.7, -1.0, 0.2), 0.0)
        self.assertEqual(clipped_term_slope(0.7, 1.0, 0.2), 1.0)
        # Kink takes the unclipped side
        self.assertEqual(clipped_term_slope(1.2, 1.0, 0.2), 1.0)

    def test_pspo_term_and_slope(self):
        self.assertAlmostEqual(pspo_term(1.5, 2.0, 0.2), 2.8, places=14)
        self.assertAlmostEqual(pspo_term(1.0, -0.7, 0.3), -0.7, places=15)
        for r in (0.0, 0.4, 1.0, 7.5):
            self.assertAlmostEqual(pspo_term_slope(r, 3.0, 0.2), 2.4, places=14)

    def test_alpha_monotonicity_of_the_ratio_deviation(self):
        deviations = [abs(smoothed_ratio(3.0, alpha) - 1.0) for alpha in np.linspace(0, 1, 11)]
        self.assertTrue(all(a >= b for a, b in zip(deviations, deviations[1:])))

    def test_surrogate_slope_per_mode(self):
        self.assertEqual(surrogate_slope(1.5, 1.0, SurrogateConfig.for_mode('clip', epsilon=0.2)), 0.0)
        self.assertAlmostEqual(surrogate_slope(1.5, 1.0, SurrogateConfig.for_mode('pspo', alpha=0.1)), 0.9)
        self.assertEqual(surrogate_slope(1.5, 1.0, SurrogateConfig.for_mode('raw')), 1.0)


class SurrogateConfigTests(SimpleTestCase):
    def test_mode_iteration_defaults(self):
        self.assertEqual(SurrogateConfig.for_mode('noclip').iterations_mu, 1)
        self.assertEqual(SurrogateConfig.for_mode('clip').iterations_mu, 2)
        self.assertEqual(SurrogateConfig.for_mode('pspo').iterations_mu, 2)
        self.assertEqual(SurrogateConfig.for_mode('raw').iterations_mu, 2)

    def test_noclip_forces_a_single_pass(self):
        with self.assertLogs('policy.services', level='WARNING'):
            cfg = SurrogateConfig(mode='noclip', iterations_mu=3)
        self.assertEqual(cfg.iterations_mu, 1)

    def test_invalid_values_are_rejected(self):
        for kwargs in ({'mode': 'ppo'}, {'alpha': 1.2}, {'epsilon': 0.0}, {'beta': -0.1},
                       {'iterations_mu': 0}, {'token_aggregation': 'max'}, {'smoothing_target': 'best'}):
            with self.subTest(**kwargs), self.assertRaises(ConfigurationError):
                SurrogateConfig(**kwargs)


class GroupObjectiveTests(SimpleTestCase):
    def test_single_on_policy_token_returns_its_advantage(self):
        batch = GroupBatch(0, ((1,),), (np.log([0.5]),), np.array([0.5]), np.array([0.5]))
        policy = TabularPolicy(2)
        for mode in ('clip', 'noclip', 'pspo', 'raw'):
            cfg = SurrogateConfig.for_mode(mode)
            self.assertAlmostEqual(group_objective(batch, policy, policy, None, cfg), 0.5, places=12)

    def test_clip_objective(self):
        cur, old = two_arm_policies()
        cfg = SurrogateConfig.for_mode('clip', epsilon=0.2)
        self.assertAlmostEqual(group_objective(two_arm_batch(), cur, old, None, cfg), 0.85, places=12)

    def test_pspo_objective(self):
        cur, old = two_arm_policies()
        cfg = SurrogateConfig.for_mode('pspo', alpha=0.1)
        self.assertAlmostEqual(group_objective(two_arm_batch(), cur, old, None, cfg), 1.0, places=12)

    def test_noclip_rejects_off_policy_batches(self):
        cur, old = two_arm_policies()
        with self.assertRaises(OffPolicyBatchError):
            group_objective(two_arm_batch(), cur, old, None, SurrogateConfig.for_mode('noclip'))

    def test_reference_required_for_kl_penalty(self):
        cur, old = two_arm_policies()
        with self.assertRaises(ConfigurationError):
            group_objective(two_arm_batch(), cur, old, None, SurrogateConfig(beta=0.1))

    def test_kl_penalty_lowers_the_objective(self):
        cur, old = two_arm_policies()
        plain = group_objective(two_arm_batch(), cur, old, None, SurrogateConfig())
        penalised = group_objective(two_arm_batch(), cur, old, old, SurrogateConfig(beta=0.5))
        self.assertLess(penalised, plain)

    def test_sum_aggregation_weights_every_token(self):
        batch = GroupBatch(0, ((0, 1),), (np.log([0.5, 0.5]),), np.array([1.0]), np.array([1.0]))
        policy = TabularPolicy(2)
        mean_cfg = SurrogateConfig.for_mode('raw', token_aggregation='mean')
        sum_cfg = SurrogateConfig.for_mode('raw', token_aggregation='sum')
        self.assertAlmostEqual(group_objective(batch, policy, policy, None, mean_cfg), 1.0, places=12)
        self.assertAlmostEqual(group_objective(batch, policy, policy, None, sum_cfg), 2.0, places=12)


class ObjectiveGradientTests(SimpleTestCase):
    def test_full_anchoring_has_zero_gradient(self):
        cur, old = two_arm_policies()
        gradient = objective_gradient(two_arm_batch((1.0, -1.0)), cur, old, SurrogateConfig(alpha=1.0))
        for values in gradient.values():
            assert_allclose(values, 0.0, atol=0.0)

    def test_clipped_token_contributes_nothing(self):
        cur, old = two_arm_policies()
        gradient = objective_gradient(two_arm_batch(), cur, old, SurrogateConfig.for_mode('clip', epsilon=0.2))
        # Only action 1 (r = 0.5, A = 1) is inside the unclipped branch: 0.5 * 0.5 * (e_1 - pi)
        assert_allclose(gradient[ROOT], [-0.1875, 0.1875], atol=1e-14)

    def test_pspo_gradient_is_scaled_unclipped_gradient(self):
        cur, old = two_arm_policies()
        batch = two_arm_batch((0.5, -0.5))
        raw = objective_gradient(batch, cur, old, SurrogateConfig.for_mode('raw'))
        pspo = objective_gradient(batch, cur, old, SurrogateConfig.for_mode('pspo', alpha=0.3))
        assert_allclose(pspo[ROOT], 0.7 * raw[ROOT], atol=1e-14)

    def test_untouched_batch_states_get_zero_vectors(self):
        policy = TabularPolicy(2)
        batch = two_arm_batch((0.0, 0.0))
        gradient = objective_gradient(batch, policy, policy, SurrogateConfig.for_mode('clip'))
        self.assertEqual(list(gradient), [ROOT])
        assert_allclose(gradient[ROOT], 0.0)

    def test_merge_gradients_scales_and_sums(self):
        merged = merge_gradients([{ROOT: np.array([1.0, -1.0])}, {ROOT: np.array([3.0, 1.0])}], scale=0.5)
        assert_allclose(merged[ROOT], [2.0, 0.0])


class PerStateIdentityTests(SimpleTestCase):
    def test_surrogate_splits_into_on_and_off_policy_parts(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            size = int(rng.integers(2, 33))
            p_cur, p_old = softmax(rng.normal(size=size)), softmax(rng.normal(size=size))
            advantages = rng.uniform(-1, 1, size=size)
            alpha = rng.random()
            expected = (1 - alpha) * p_cur @ advantages + alpha * p_old @ advantages
            self.assertAlmostEqual(state_surrogate(p_cur, p_old, advantages, alpha), expected, delta=1e-12)

    def test_gradient_is_scaled_policy_gradient(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            size = int(rng.integers(2, 33))
            logits = rng.normal(size=size)
            p_old = softmax(rng.normal(size=size))
            advantages = rng.uniform(-1, 1, size=size)
            alpha = rng.random()
            assert_allclose(
                state_surrogate_gradient(logits, p_old, advantages, alpha),
                (1 - alpha) * on_policy_advantage_gradient(logits, advantages),
                atol=1e-12,
            )


class RatioStatisticsTests(SimpleTestCase):
    def test_smoothing_shrinks_the_logged_deviation(self):
        cur, old = two_arm_policies()
        cfg = SurrogateConfig.for_mode('pspo', alpha=0.1)
        stats = ratio_statistics([two_arm_batch()], cur, old, None, cfg)
        self.assertAlmostEqual(stats.max_ratio_dev, 0.5, places=12)
        self.assertAlmostEqual(stats.smoothed_ratio_dev, 0.45, places=12)
        self.assertEqual(stats.clip_fraction, 0.0)

    def test_clip_fraction_counts_flat_tokens(self):
        cur, old = two_arm_policies()
        stats = ratio_statistics([two_arm_batch()], cur, old, None, SurrogateConfig.for_mode('clip', epsilon=0.2))
        self.assertEqual(stats.n_tokens, 2)
        self.assertEqual(stats.clip_fraction, 0.5)
