import math

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from policy.tabular import StateKey, TabularPolicy
from .services import (
    Categorical, kl_divergence, l1_distance, scaled_bound, smooth_distribution,
    state_diagnostics, tv_distance,
)


class CategoricalTests(SimpleTestCase):
    def test_valid_vector_is_read_only(self):
        dist = Categorical([0.2, 0.8])
        self.assertEqual(len(dist), 2)
        with self.assertRaises(ValueError):
            dist.probs[0] = 0.5

    def test_rejects_bad_vectors(self):
        for probs in ([1.0], [0.5, 0.6], [-0.1, 1.1], [math.nan, 1.0]):
            with self.subTest(probs=probs), self.assertRaises(ValueError):
                Categorical(probs)


class DistanceTests(SimpleTestCase):
    def test_l1_distance(self):
        self.assertAlmostEqual(l1_distance([0.7, 0.3], [0.5, 0.5]), 0.4, places=15)
        self.assertEqual(l1_distance([0.25, 0.75], [0.25, 0.75]), 0.0)
        self.assertEqual(l1_distance([1.0, 0.0], [0.0, 1.0]), 2.0)
        self.assertEqual(tv_distance([1.0, 0.0], [0.0, 1.0]), 1.0)

    def test_length_mismatch(self):
        with self.assertRaises(ValueError):
            l1_distance([0.5, 0.5], [0.2, 0.3, 0.5])

    def test_kl_divergence(self):
        self.assertEqual(kl_divergence([0.3, 0.7], [0.3, 0.7]), 0.0)
        self.assertAlmostEqual(kl_divergence([0.7, 0.3], [0.5, 0.5]), 0.0823, delta=1e-4)
        self.assertAlmostEqual(kl_divergence([1.0, 0.0], [0.5, 0.5]), math.log(2.0), places=15)

    def test_kl_is_infinite_off_support(self):
        self.assertEqual(kl_divergence([0.5, 0.5], [1.0, 0.0]), math.inf)
        self.assertEqual(kl_divergence([1.0, 0.0], [1.0, 0.0]), 0.0)

    def test_smooth_distribution(self):
        assert_allclose(smooth_distribution([0.7, 0.3], [0.5, 0.5], 0.5).probs, [0.6, 0.4], atol=1e-15)
        assert_allclose(smooth_distribution([0.7, 0.3], [0.5, 0.5], 0.0).probs, [0.7, 0.3])
        assert_allclose(smooth_distribution([0.7, 0.3], [0.5, 0.5], 1.0).probs, [0.5, 0.5])
        with self.assertRaises(ValueError):
            smooth_distribution([0.7, 0.3], [0.5, 0.5], -0.1)

    def test_scaled_bound_treats_zero_times_infinity_as_zero(self):
        self.assertEqual(scaled_bound(math.inf, 0.0), 0.0)
        self.assertEqual(scaled_bound(math.inf, 0.5), math.inf)
        self.assertEqual(scaled_bound(2.0, 0.25), 0.5)


class SmoothingContractionTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(2024)

    def _pair(self, with_zeros=False):
        size = int(self.rng.integers(2, 65))
        p = self.rng.dirichlet(np.ones(size))
        q = self.rng.dirichlet(np.ones(size))
        if with_zeros:
            p[self.rng.random(size) < 0.3] = 0.0
            p[int(self.rng.integers(size))] += 0.1
            p /= p.sum()
        return p, q

    def test_total_variation_shrinks_by_one_minus_alpha(self):
        for _ in range(500):
            p, q = self._pair()
            alpha = self.rng.random()
            smoothed = smooth_distribution(p, q, alpha)
            self.assertAlmostEqual(tv_distance(smoothed, q), (1 - alpha) * tv_distance(p, q), delta=1e-12)

    def test_total_variation_is_monotone_in_alpha(self):
        p, q = self._pair()
        radii = [tv_distance(smooth_distribution(p, q, a), q) for a in np.linspace(0, 1, 21)]
        self.assertTrue(all(a >= b - 1e-15 for a, b in zip(radii, radii[1:])))
        self.assertAlmostEqual(radii[-1], 0.0, delta=1e-15)

    def test_kl_bounds_in_both_directions(self):
        for with_zeros in (False, True):
            for _ in range(300):
                p, q = self._pair(with_zeros)
                alpha = self.rng.random()
                smoothed = smooth_distribution(p, q, alpha)
                forward = scaled_bound(kl_divergence(p, q), 1 - alpha)
                reverse = scaled_bound(kl_divergence(q, p), 1 - alpha)
                self.assertLessEqual(kl_divergence(smoothed, q), forward + 1e-12)
                if math.isfinite(reverse):
                    self.assertLessEqual(kl_divergence(q, smoothed), reverse + 1e-12)


class StateDiagnosticsTests(SimpleTestCase):
    def test_identical_policies_have_zero_divergence(self):
        policy = TabularPolicy(3, {StateKey(0): [1.0, 0.0, -1.0]})
        summary = state_diagnostics(policy, policy.snapshot(), [StateKey(0), StateKey(0, (1,))])
        self.assertEqual(summary.n_states, 2)
        self.assertEqual(summary.tv_mean, 0.0)
        self.assertEqual(summary.kl_mean, 0.0)

    def test_distinct_states_are_counted_once(self):
        cur = TabularPolicy(2, {StateKey(0): [math.log(3.0), 0.0]})
        old = TabularPolicy(2)
        summary = state_diagnostics(cur, old, [StateKey(0), StateKey(0)])
        self.assertEqual(summary.n_states, 1)
        self.assertAlmostEqual(summary.tv_mean, 0.25, places=12)

    def test_no_states(self):
        self.assertEqual(state_diagnostics(TabularPolicy(2), TabularPolicy(2), []).n_states, 0)
