import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from policy.tabular import StateKey, TabularPolicy, log_softmax
from .services import (
    END_TOKEN, ArithmeticTask, BanditTask, bandit_expectation, evaluate_greedy, evaluate_sampled,
    make_taskset, read_taskset, rollout, sample_group, sampling_distribution, scripted_policy,
    write_taskset,
)


def all_pairs():
    return [ArithmeticTask((a, b)) for a in range(10) for b in range(10)]


class ArithmeticTaskTests(SimpleTestCase):
    def test_prompt_id_and_gold(self):
        task = ArithmeticTask((7, 5))
        self.assertEqual(task.prompt_id, 75)
        self.assertEqual(task.gold, 12.0)
        self.assertEqual(task.vocab_size, 13)

    def test_operands_are_validated(self):
        with self.assertRaises(ValueError):
            ArithmeticTask((10, 1))

    def test_render_and_tokenize(self):
        task = ArithmeticTask((7, 5))
        tokens = task.tokenize("#### 12")
        self.assertEqual(tokens, [10, 11, 1, 2])
        self.assertEqual(task.render(tokens + [END_TOKEN]), "#### 12")
        for text in ("x", "# 12"):
            with self.assertRaises(ValueError):
                task.tokenize(text)

    def test_evaluate_uses_the_reward_grader(self):
        task = ArithmeticTask((7, 5))
        self.assertEqual(task.evaluate(task.tokenize("12"))[0], 1.0)
        self.assertEqual(task.evaluate(task.tokenize("#### 3"))[0], 0.05)
        self.assertEqual(task.evaluate([END_TOKEN])[0], 0.0)


class RolloutTests(SimpleTestCase):
    def test_greedy_rollout_is_deterministic(self):
        task = ArithmeticTask((3, 4))
        policy = TabularPolicy(13, {StateKey(34): np.linspace(0, 1, 13)})
        first = rollout(task, policy, temperature=0, seed=1)
        second = rollout(task, policy, temperature=0, seed=99)
        self.assertEqual(first.actions, second.actions)
        assert_allclose(first.old_logprobs, second.old_logprobs)

    def test_uniform_first_token_frequencies(self):
        task = ArithmeticTask((1, 1), max_len=1)
        policy = TabularPolicy(13)
        n = 10000
        counts = np.zeros(13)
        for seed in range(n):
            counts[rollout(task, policy, temperature=1.0, seed=seed).actions[0]] += 1
        p = 1 / 13
        sigma = math.sqrt(n * p * (1 - p))
        # 4 sigma keeps the 13 simultaneous checks well clear of chance failures
        self.assertTrue(np.all(np.abs(counts - n * p) <= 4 * sigma), counts)

    def test_truncated_at_max_len(self):
        task = ArithmeticTask((2, 2), max_len=6)
        logits = np.zeros(13)
        logits[END_TOKEN] = -50.0
        policy = TabularPolicy(13)
        state = StateKey(22)
        for _ in range(6):
            policy.set_logits(state, logits)
            state = state.child(0)
        episode = rollout(task, policy, temperature=0)
        self.assertEqual(len(episode), 6)
        self.assertNotIn(END_TOKEN, episode.actions)

    def test_recorded_logprobs_match_the_policy(self):
        task = ArithmeticTask((6, 3))
        policy = TabularPolicy(13, {StateKey(63): np.random.default_rng(0).normal(size=13)})
        episode = rollout(task, policy, temperature=0.8, seed=4)
        for state, action, logprob in zip(episode.states, episode.actions, episode.old_logprobs):
            self.assertAlmostEqual(float(log_softmax(policy.logits(state))[action]), logprob, delta=1e-12)

    def test_sampler_convention_records_the_tempered_distribution(self):
        task = BanditTask((1.0, 0.0, 0.0))
        policy = TabularPolicy(3, {StateKey(0): [1.0, 0.0, 0.0]})
        episode = rollout(task, policy, temperature=0.5, seed=2, logprob_convention='sampler')
        expected = np.log(sampling_distribution(policy.logits(StateKey(0)), 0.5)[episode.actions[0]])
        self.assertAlmostEqual(float(episode.old_logprobs[0]), float(expected), places=14)

    def test_nucleus_truncation(self):
        probs = sampling_distribution(np.log([0.5, 0.3, 0.15, 0.05]), 1.0, top_p=0.7)
        assert_allclose(probs, [0.625, 0.375, 0.0, 0.0], atol=1e-12)

    def test_invalid_arguments(self):
        task = ArithmeticTask((1, 2))
        with self.assertRaises(ValueError):
            rollout(task, TabularPolicy(13), temperature=-1)
        with self.assertRaises(ValueError):
            rollout(task, TabularPolicy(13), top_p=0.0)
        with self.assertRaises(ValueError):
            rollout(task, TabularPolicy(5))


class SampleGroupTests(SimpleTestCase):
    def test_uniform_group_is_zero_sum(self):
        batch = sample_group(ArithmeticTask((4, 4)), TabularPolicy(13), group_size=4, seed=3)
        self.assertEqual(batch.group_size, 4)
        self.assertAlmostEqual(float(batch.advantages.sum()), 0.0, delta=1e-12)

    def test_single_sample_has_zero_advantage(self):
        batch = sample_group(ArithmeticTask((4, 4)), TabularPolicy(13), group_size=1, seed=3)
        assert_allclose(batch.advantages, [0.0])

    def test_deterministic_policy_gives_identical_rewards(self):
        tasks = [ArithmeticTask((4, 4))]
        policy = scripted_policy(tasks, lambda task: "#### 8", strength=60.0)
        batch = sample_group(tasks[0], policy, group_size=4, temperature=1.0, seed=0)
        assert_allclose(batch.rewards, [1.0] * 4)
        assert_allclose(batch.advantages, np.zeros(4), atol=0.0)

    def test_same_seed_same_group(self):
        task = ArithmeticTask((5, 9))
        first = sample_group(task, TabularPolicy(13), group_size=4, seed=17)
        second = sample_group(task, TabularPolicy(13), group_size=4, seed=17)
        self.assertEqual(first.completions, second.completions)


class EvaluationTests(SimpleTestCase):
    def test_scripted_policy_is_perfect(self):
        tasks = all_pairs()
        policy = scripted_policy(tasks, lambda task: f"#### {int(task.gold)}")
        self.assertEqual(evaluate_greedy(tasks, policy), 1.0)

    def test_uniform_policy_rarely_scores(self):
        self.assertLessEqual(evaluate_greedy(all_pairs(), TabularPolicy(13)), 0.05)

    def test_immediate_end_scores_zero(self):
        tasks = all_pairs()
        policy = scripted_policy(tasks, lambda task: "")
        self.assertEqual(evaluate_greedy(tasks, policy), 0.0)

    def test_sampled_evaluation_of_a_confident_policy(self):
        tasks = all_pairs()[:20]
        policy = scripted_policy(tasks, lambda task: f"#### {int(task.gold)}", strength=60.0)
        self.assertEqual(evaluate_sampled(tasks, policy, temperature=0.8, seed=1), 1.0)

    def test_bandit_expectation_is_exact(self):
        task = BanditTask((1.0, -1.0, 0.5))
        policy = TabularPolicy(3, {StateKey(0): np.log([0.2, 0.3, 0.5])})
        value = bandit_expectation(task, policy, lambda a: task.advantage_table[a])
        self.assertAlmostEqual(value, 0.2 - 0.3 + 0.25, places=12)


class TasksetTests(SimpleTestCase):
    def test_make_taskset_splits(self):
        train, evaluation = make_taskset(200, 50, seed=0)
        self.assertEqual((len(train), len(evaluation)), (200, 50))
        again, _ = make_taskset(200, 50, seed=0)
        self.assertEqual([t.operands for t in train], [t.operands for t in again])

    def test_write_then_read(self):
        train, evaluation = make_taskset(12, 4, seed=3)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'tasks.tsv'
            write_taskset(path, train, evaluation)
            loaded_train, loaded_eval = read_taskset(path)
            header = path.read_text().splitlines()[0]
        self.assertEqual(header, "prompt_id\ta\tb\tgold\tsplit")
        self.assertEqual(loaded_train, train)
        self.assertEqual(loaded_eval, evaluation)

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            read_taskset('/nonexistent/tasks.tsv')

    def test_wrong_gold_is_rejected(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'tasks.tsv'
            path.write_text("prompt_id\ta\tb\tgold\tsplit\n12\t1\t2\t4\ttrain\n")
            with self.assertRaisesMessage(ValueError, "Row 2"):
                read_taskset(path)

    def test_missing_columns(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'tasks.tsv'
            path.write_text("prompt_id\ta\tb\n12\t1\t2\n")
            with self.assertRaisesMessage(ValueError, "gold, split"):
                read_taskset(path)
