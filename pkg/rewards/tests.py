import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from .services import (
    SOURCE_FORMAT_MATCH, SOURCE_LAST_TOKEN, SOURCE_NONE, GroupBatch, RewardOutcome,
    extract_answer, grade_completion, group_advantages,
)


class GradeCompletionTests(SimpleTestCase):
    def test_marked_answer_scores_one(self):
        outcome = grade_completion("So h = 132 / 11 = 12 inches. #### 12", 12)
        self.assertEqual(outcome.score, 1.0)
        self.assertEqual(outcome.source, SOURCE_FORMAT_MATCH)
        self.assertEqual(outcome.parsed_value, 12.0)

    def test_unmarked_answer_falls_back_to_last_number(self):
        outcome = grade_completion("the answer is 12", 12)
        self.assertEqual(outcome.score, 1.0)
        self.assertEqual(outcome.source, SOURCE_LAST_TOKEN)

    def test_wrong_marked_answer_earns_format_bonus(self):
        self.assertEqual(grade_completion("#### 13", 12).score, 0.05)

    def test_wrong_unmarked_answer_scores_zero(self):
        self.assertEqual(grade_completion("maybe 13", 12).score, 0.0)

    def test_nothing_to_parse(self):
        outcome = grade_completion("no numbers here", 12)
        self.assertEqual(outcome.score, 0.0)
        self.assertEqual(outcome.source, SOURCE_NONE)
        self.assertIsNone(outcome.parsed_value)

    def test_final_marker_wins(self):
        self.assertEqual(grade_completion("#### 5\n#### 12", 12).score, 1.0)
        self.assertEqual(grade_completion("#### 12\n#### 5", 12).score, 0.05)

    def test_marker_without_number_falls_back(self):
        value, source = extract_answer("it is 12 ####")
        self.assertEqual(value, 12.0)
        self.assertEqual(source, SOURCE_LAST_TOKEN)

    def test_currency_percent_and_separators_are_stripped(self):
        self.assertEqual(grade_completion("#### $1,234", 1234).score, 1.0)
        self.assertEqual(grade_completion("#### 45%", 45).score, 1.0)
        self.assertEqual(grade_completion("total: €2,500.50", 2500.5).score, 1.0)
        self.assertEqual(grade_completion("#### -7", -7).score, 1.0)

    def test_absolute_tolerance(self):
        self.assertEqual(grade_completion("#### 12.0000005", 12).score, 1.0)
        self.assertEqual(grade_completion("#### 12.00001", 12).score, 0.05)
        self.assertEqual(grade_completion("#### 12.00001", 12, tolerance=1e-4).score, 1.0)

    def test_instruction_leak_is_graded_on_the_last_number(self):
        text = "12 apples.\nQuestion: Tom has 3 pens and buys 4 more. How many? Answer: 7"
        self.assertEqual(grade_completion(text, 12).score, 0.0)

    def test_scores_are_always_one_of_three_values(self):
        texts = ["", "####", "#### 3", "3", "3 #### 4", "#### 4 then 3", "x 1,000,000", "12.5%"]
        for text in texts:
            for gold in (3.0, 4.0, 12.5, 1e6):
                self.assertIn(grade_completion(text, gold).score, (0.0, 0.05, 1.0))

    def test_non_finite_gold_is_rejected(self):
        with self.assertRaises(ValueError):
            grade_completion("#### 1", float('nan'))

    def test_outcome_validates_source(self):
        with self.assertRaises(ValueError):
            RewardOutcome(1.0, 1.0, 'guess')
        with self.assertRaises(ValueError):
            RewardOutcome(0.0, 2.0, SOURCE_NONE)


class GroupAdvantageTests(SimpleTestCase):
    def test_mean_centering(self):
        assert_allclose(group_advantages([1.0, 0.0]), [0.5, -0.5])
        assert_allclose(group_advantages([1.0, 0.05, 0.0, 1.0]), [0.4875, -0.4625, -0.5125, 0.4875], atol=1e-15)

    def test_identical_rewards_give_zero_advantages(self):
        assert_allclose(group_advantages([0.05] * 4), np.zeros(4), atol=0.0)
        assert_allclose(group_advantages([1.0]), [0.0], atol=0.0)

    def test_advantages_sum_to_zero(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            rewards = rng.choice([0.0, 0.05, 1.0], size=int(rng.integers(1, 17)))
            self.assertAlmostEqual(float(group_advantages(rewards).sum()), 0.0, delta=1e-12)

    def test_shifting_rewards_leaves_advantages_unchanged(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            rewards = rng.uniform(-2.0, 2.0, size=int(rng.integers(2, 9)))
            shift = float(rng.uniform(-5.0, 5.0))
            assert_allclose(group_advantages(rewards + shift), group_advantages(rewards), atol=1e-12)

    def test_scaling_rewards_scales_advantages(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            rewards = rng.uniform(-2.0, 2.0, size=int(rng.integers(2, 9)))
            scale = float(rng.uniform(0.1, 10.0))
            assert_allclose(group_advantages(scale * rewards), scale * group_advantages(rewards), atol=1e-12)

    def test_normalised_advantages(self):
        advantages = group_advantages([1.0, 0.0], normalize=True)
        assert_allclose(advantages, [0.5 / 0.5001, -0.5 / 0.5001])

    def test_empty_group(self):
        with self.assertRaises(ValueError):
            group_advantages([])


class GroupBatchTests(SimpleTestCase):
    def test_sizes_must_agree(self):
        with self.assertRaises(ValueError):
            GroupBatch(0, ((1,), (2,)), (np.zeros(1),), np.zeros(2), np.zeros(2))
        with self.assertRaises(ValueError):
            GroupBatch(0, ((1, 2),), (np.zeros(1),), np.zeros(1), np.zeros(1))

    def test_summary_properties(self):
        batch = GroupBatch(3, ((1, 2), (4,)), (np.zeros(2), np.zeros(1)), [1.0, 0.0], [0.5, -0.5])
        self.assertEqual(batch.group_size, 2)
        self.assertEqual(batch.n_tokens, 3)
        self.assertEqual(batch.mean_reward, 0.5)
