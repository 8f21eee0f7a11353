import math
from dataclasses import replace
from unittest import mock

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from common.exceptions import ConfigurationError
from envs.services import ArithmeticTask, BanditTask, make_taskset, sample_group
from policy.services import SurrogateConfig, batch_states, group_objective, objective_gradient
from policy.tabular import StateKey, TabularPolicy
from .optimizers import SGD, Adam, build_optimizer
from .services import (
    ModeSpec, RunRecord, TrainConfig, compare_modes, confidence_halfwidth,
    finite_diff_gradient, train,
)

ROOT = StateKey(0)


def small_config(mode='pspo', **overrides):
    values = dict(
        surrogate=SurrogateConfig.for_mode(mode),
        learning_rate=0.1,
        batch_prompts=4,
        group_size=4,
        total_steps=6,
        eval_every=3,
        seed=0,
    )
    values.update(overrides)
    return TrainConfig(**values)


class FiniteDifferenceTests(SimpleTestCase):
    def test_linear_objective(self):
        policy = TabularPolicy(3, {ROOT: [0.7, -0.2, 0.1]})
        gradient = finite_diff_gradient(lambda p: 2.5 * p.logits(ROOT)[1], policy, [ROOT])
        assert_allclose(gradient[ROOT], [0.0, 2.5, 0.0], atol=1e-9)

    def test_quadratic_objective(self):
        policy = TabularPolicy(2, {ROOT: [3.0, 0.0]})
        gradient = finite_diff_gradient(lambda p: p.logits(ROOT)[0] ** 2, policy, [ROOT], h=1e-5)
        self.assertAlmostEqual(gradient[ROOT][0], 6.0, delta=1e-8)

    def test_step_size_range(self):
        for h in (1e-8, 1e-2):
            with self.assertRaises(ValueError):
                finite_diff_gradient(lambda p: 0.0, TabularPolicy(2), [ROOT], h=h)

    def test_policy_is_left_untouched(self):
        policy = TabularPolicy(2, {ROOT: [1.0, 2.0]})
        finite_diff_gradient(lambda p: float(p.probs(ROOT)[0]), policy, [ROOT])
        assert_allclose(policy.logits(ROOT), [1.0, 2.0])

    def test_matches_analytic_gradient_on_sampled_groups(self):
        rng = np.random.default_rng(8)
        task = ArithmeticTask((3, 5), max_len=3)
        old = TabularPolicy(13, {StateKey(35): rng.normal(size=13)})
        batch = sample_group(task, old, group_size=4, temperature=1.0, seed=2)
        batch = replace(batch, advantages=np.array([0.6, -0.1, -0.7, 0.2]))
        cur = old.snapshot()
        for state in batch_states(batch):
            cur.add_to_logits(state, rng.normal(scale=0.3, size=13))
        for cfg in (SurrogateConfig.for_mode('pspo', alpha=0.2), SurrogateConfig.for_mode('raw')):
            analytic = objective_gradient(batch, cur, old, cfg)
            numeric = finite_diff_gradient(lambda p: group_objective(batch, p, old, None, cfg), cur, sorted(analytic))
            for state in analytic:
                assert_allclose(analytic[state], numeric[state], atol=1e-6)


class OptimizerTests(SimpleTestCase):
    def test_sgd_ascends(self):
        policy = TabularPolicy(2)
        SGD(0.5).step(policy, {ROOT: np.array([1.0, -2.0])})
        assert_allclose(policy.logits(ROOT), [0.5, -1.0])

    def test_adam_first_step_moves_by_learning_rate(self):
        policy = TabularPolicy(2)
        optimizer = Adam(0.01)
        optimizer.step(policy, {ROOT: np.array([3.0, -0.5])})
        assert_allclose(policy.logits(ROOT), [0.01, -0.01], rtol=1e-6)

    def test_adam_keeps_per_state_step_counts(self):
        other = StateKey(1)
        policy = TabularPolicy(2)
        optimizer = Adam(0.01)
        optimizer.step(policy, {ROOT: np.array([1.0, -1.0])})
        optimizer.step(policy, {ROOT: np.array([1.0, -1.0])})
        optimizer.step(policy, {other: np.array([2.0, -2.0])})
        # A state seen for the first time gets a fully bias-corrected step
        assert_allclose(policy.logits(other), [0.01, -0.01], rtol=1e-6)

    def test_unknown_optimizer(self):
        with self.assertRaises(ValueError):
            build_optimizer('rmsprop', 0.1)


class TrainConfigTests(SimpleTestCase):
    def test_invalid_configs(self):
        for overrides in ({'learning_rate': -1.0}, {'eval_every': 10, 'total_steps': 5},
                          {'optimizer': 'lion'}, {'top_p': 0.0}, {'temperature': 0.0},
                          {'logprob_convention': 'mixed'}, {'group_size': 0},
                          {'sampled_eval_temperature': 0.0}):
            with self.subTest(**overrides), self.assertRaises(ConfigurationError):
                TrainConfig(**overrides)

    def test_noclip_with_sampler_logprobs_needs_plain_sampling(self):
        noclip = SurrogateConfig.for_mode('noclip')
        for overrides in ({}, {'temperature': 1.0, 'top_p': 0.9}, {'temperature': 0.8, 'top_p': 1.0}):
            with self.subTest(**overrides), self.assertRaises(ConfigurationError):
                TrainConfig(surrogate=noclip, logprob_convention='sampler', **overrides)
        config = TrainConfig(surrogate=noclip, logprob_convention='sampler', temperature=1.0, top_p=1.0)
        self.assertEqual(config.logprob_convention, 'sampler')
        # Multi-pass modes do not assume on-policy ratios
        TrainConfig(surrogate=SurrogateConfig.for_mode('clip'), logprob_convention='sampler', top_p=0.9)

    def test_dict_round_trip(self):
        config = small_config('clip', optimizer='sgd', top_p=0.9)
        self.assertEqual(TrainConfig.from_dict(config.to_dict()), config)

    def test_record_flags_non_finite_values(self):
        values = dict(step=0, pass_index=0, mean_reward=0.0, objective=0.0, max_ratio_dev=0.0,
                      smoothed_ratio_dev=0.0, clip_fraction=0.0, tv_mean=0.0, kl_mean=0.0)
        self.assertFalse(RunRecord(**values).nonfinite_flag)
        self.assertTrue(RunRecord(**{**values, 'kl_mean': math.inf}).nonfinite_flag)
        self.assertTrue(RunRecord(**{**values, 'greedy_accuracy': math.nan}).nonfinite_flag)


class TrainTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.train_tasks, cls.eval_tasks = make_taskset(16, 8, seed=1)

    def test_full_anchoring_leaves_parameters_unchanged(self):
        config = small_config(surrogate=SurrogateConfig(mode='pspo', alpha=1.0), learning_rate=0.5)
        result = train(self.train_tasks, config, self.eval_tasks)
        self.assertTrue(result.policy.same_parameters(TabularPolicy(13)))
        self.assertEqual(len(result.records), 12)

    def test_zero_learning_rate_still_records(self):
        result = train(self.train_tasks, small_config('clip', learning_rate=0.0), self.eval_tasks)
        self.assertTrue(result.policy.same_parameters(TabularPolicy(13)))
        self.assertEqual([(r.step, r.pass_index) for r in result.records][:3], [(0, 0), (0, 1), (1, 0)])

    def test_first_pass_ratios_are_one(self):
        for mode in ('clip', 'pspo', 'raw', 'noclip'):
            result = train(self.train_tasks, small_config(mode, learning_rate=0.3), self.eval_tasks)
            for record in result.records:
                if record.pass_index == 0:
                    self.assertLessEqual(record.max_ratio_dev, 1e-9)

    def test_single_pass_mode(self):
        result = train(self.train_tasks, small_config('noclip'), self.eval_tasks)
        self.assertEqual({r.pass_index for r in result.records}, {0})
        self.assertEqual(len(result.records), 6)

    def test_smoothed_deviation_is_scaled(self):
        config = small_config(surrogate=SurrogateConfig.for_mode('pspo', alpha=0.1), learning_rate=0.5)
        for record in train(self.train_tasks, config, self.eval_tasks).records:
            self.assertAlmostEqual(record.smoothed_ratio_dev, 0.9 * record.max_ratio_dev, delta=1e-12)

    def test_greedy_accuracy_on_the_eval_schedule(self):
        result = train(self.train_tasks, small_config(), self.eval_tasks)
        evaluated = [(r.step, r.pass_index) for r in result.records if r.greedy_accuracy is not None]
        self.assertEqual(evaluated, [(2, 1), (5, 1)])
        self.assertEqual(result.final_greedy_accuracy, result.records[-1].greedy_accuracy)

    def test_sampled_accuracy_follows_the_eval_schedule(self):
        result = train(self.train_tasks, small_config(sampled_eval_temperature=1.0), self.eval_tasks)
        greedy = [(r.step, r.pass_index) for r in result.records if r.greedy_accuracy is not None]
        sampled = [r for r in result.records if r.sampled_accuracy is not None]
        self.assertEqual([(r.step, r.pass_index) for r in sampled], greedy)
        for record in sampled:
            self.assertTrue(0.0 <= record.sampled_accuracy <= 1.0)
        self.assertEqual(result.final_sampled_accuracy, sampled[-1].sampled_accuracy)

        plain = train(self.train_tasks, small_config(), self.eval_tasks)
        self.assertTrue(all(r.sampled_accuracy is None for r in plain.records))
        self.assertIsNone(plain.final_sampled_accuracy)

    def test_noclip_with_untempered_sampler_logprobs_trains(self):
        config = small_config('noclip', logprob_convention='sampler', temperature=1.0, top_p=1.0)
        result = train(self.train_tasks, config, self.eval_tasks)
        self.assertFalse(result.diverged)
        self.assertEqual(len(result.records), 6)

    def test_training_is_deterministic(self):
        config = small_config('clip', temperature=1.0, top_p=0.9)
        first = train(self.train_tasks, config, self.eval_tasks)
        second = train(self.train_tasks, config, self.eval_tasks)
        self.assertEqual(first.records, second.records)
        self.assertTrue(first.policy.same_parameters(second.policy))

    def test_records_are_streamed(self):
        seen = []
        result = train(self.train_tasks, small_config(), self.eval_tasks, on_record=seen.append)
        self.assertEqual(seen, result.records)

    def test_non_finite_objective_stops_the_run(self):
        with mock.patch('trainer.services.group_objective', return_value=math.nan):
            result = train(self.train_tasks, small_config(), self.eval_tasks)
        self.assertTrue(result.diverged)
        self.assertEqual(len(result.records), 1)
        self.assertTrue(result.records[0].nonfinite_flag)

    def test_best_checkpoint_selection(self):
        config = small_config(select_best_checkpoint=True, eval_every=1)
        result = train(self.train_tasks, config, self.eval_tasks)
        accuracies = [r.greedy_accuracy for r in result.records if r.greedy_accuracy is not None]
        self.assertEqual(result.best_accuracy, max(accuracies))
        self.assertEqual(result.final_greedy_accuracy, max(accuracies))

    def test_bandit_learns_the_positive_arm(self):
        task = BanditTask((0.0, 0.0, 1.0, 0.0))
        config = TrainConfig(
            surrogate=SurrogateConfig.for_mode('pspo', alpha=0.1),
            learning_rate=0.1, batch_prompts=1, group_size=4,
            total_steps=200, eval_every=200, temperature=1.0, seed=0,
        )
        result = train([task], config)
        self.assertEqual(int(np.argmax(result.policy.logits(ROOT))), 2)
        self.assertEqual(result.final_greedy_accuracy, 1.0)


class ConstantRewardTests(SimpleTestCase):
    def test_equal_rewards_give_a_zero_gradient_in_every_mode(self):
        rng = np.random.default_rng(3)
        task = BanditTask((0.5, 0.5, 0.5, 0.5))
        old = TabularPolicy(4, {ROOT: rng.normal(size=4)})
        batch = sample_group(task, old, group_size=6, temperature=1.0, seed=9)
        assert_allclose(batch.advantages, np.zeros(6), atol=0.0)
        moved = old.snapshot()
        moved.add_to_logits(ROOT, rng.normal(scale=0.5, size=4))
        for mode in ('clip', 'noclip', 'pspo', 'raw'):
            # noclip only accepts on-policy ratios
            cur = old if mode == 'noclip' else moved
            gradient = objective_gradient(batch, cur, old, SurrogateConfig.for_mode(mode))
            self.assertEqual(sorted(gradient), [ROOT])
            assert_allclose(gradient[ROOT], np.zeros(4), atol=1e-15, err_msg=mode)


class CompareModesTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.train_tasks, cls.eval_tasks = make_taskset(12, 6, seed=2)
        cls.base = small_config(total_steps=4, eval_every=2)

    def test_runs_every_mode_and_seed(self):
        report = compare_modes(self.train_tasks, self.eval_tasks, self.base, ['clip', 'pspo'], [0, 1, 2])
        self.assertEqual(len(report.runs), 6)
        self.assertEqual([(r.spec.label, r.seed) for r in report.runs],
                         [('clip', 0), ('clip', 1), ('clip', 2), ('pspo', 0), ('pspo', 1), ('pspo', 2)])
        grids = {tuple(rec.step for rec in r.result.records) for r in report.runs}
        self.assertEqual(len(grids), 1)
        per_mode = report.per_mode()
        self.assertEqual(list(per_mode['label']), ['clip', 'pspo'])
        self.assertEqual(list(per_mode['runs']), [3, 3])

    def test_repeated_mode_gives_identical_runs(self):
        report = compare_modes(self.train_tasks, self.eval_tasks, self.base, ['pspo', 'pspo'], [4])
        first, second = (run.summary.to_dict() for run in report.runs)
        self.assertEqual(first, second)

    def test_parallel_workers_match_sequential(self):
        sequential = compare_modes(self.train_tasks, self.eval_tasks, self.base, ['clip', 'raw:2'], [0, 1])
        parallel = compare_modes(self.train_tasks, self.eval_tasks, self.base, ['clip', 'raw:2'], [0, 1], workers=3)
        self.assertTrue(sequential.to_frame().equals(parallel.to_frame()))

    def test_first_passes_share_sampling_streams(self):
        report = compare_modes(self.train_tasks, self.eval_tasks, self.base, ['clip', 'pspo'], [0])
        clip_first, pspo_first = (run.result.records[0] for run in report.runs)
        self.assertEqual(clip_first.mean_reward, pspo_first.mean_reward)

    def test_smoothing_keeps_later_passes_closer_to_the_old_policy(self):
        task = BanditTask((0.0, 0.2, 1.0, -0.5, 0.1))
        base = TrainConfig(optimizer='sgd', learning_rate=1.0, batch_prompts=1, group_size=4,
                           total_steps=20, eval_every=20, temperature=1.0)
        report = compare_modes([task], None, base, ['raw:2', 'pspo'], [0, 1, 2])
        raw_runs, pspo_runs = report.runs[:3], report.runs[3:]
        for run in report.runs:
            self.assertLessEqual(run.summary.first_pass_ratio_dev, 1e-9)
        for raw, pspo in zip(raw_runs, pspo_runs):
            # Step 0 starts from the same policy and samples, so only the update size differs
            self.assertLessEqual(pspo.result.records[1].smoothed_ratio_dev, raw.result.records[1].smoothed_ratio_dev)
        calmer = sum(
            pspo.summary.later_pass_smoothed_dev < raw.summary.later_pass_smoothed_dev
            for raw, pspo in zip(raw_runs, pspo_runs)
        )
        self.assertGreaterEqual(calmer, 2)

    def test_mode_spec_parsing(self):
        spec = ModeSpec.parse('raw:3', SurrogateConfig(alpha=0.2))
        self.assertEqual((spec.label, spec.surrogate.mode, spec.surrogate.iterations_mu), ('raw:3', 'raw', 3))
        self.assertEqual(spec.surrogate.alpha, 0.2)
        self.assertEqual(ModeSpec.parse('noclip').surrogate.iterations_mu, 1)
        for text in ('ppo', 'clip:x'):
            with self.assertRaises(ConfigurationError):
                ModeSpec.parse(text)

    def test_confidence_halfwidth(self):
        self.assertEqual(confidence_halfwidth([0.5]), 0.0)
        self.assertAlmostEqual(confidence_halfwidth([0.2, 0.4, 0.6]), 1.96 * 0.2 / math.sqrt(3), places=12)
