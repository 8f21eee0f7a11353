# harness/verification.py

from dataclasses import dataclass, replace
import logging
import math

import numpy as np

from common.seeding import derive_seed
from divergence.services import kl_divergence, scaled_bound, smooth_distribution, tv_distance
from envs.services import ArithmeticTask, BanditTask, bandit_expectation, rollout, sample_group
from policy.services import (
    SurrogateConfig, batch_states, group_objective, iter_token_terms, objective_gradient,
    on_policy_advantage_gradient, pspo_term, smooth_prob, smoothed_ratio, state_surrogate,
    state_surrogate_gradient,
)
from policy.tabular import StateKey, TabularPolicy, log_softmax, softmax
from rewards.services import grade_completion, group_advantages
from trainer.services import finite_diff_gradient

logger = logging.getLogger(__name__)

# (completion, gold, expected score)
GOLDEN_COMPLETIONS = [
    ("#### 12", 12, 1.0),
    ("The answer is 7 + 5 = 12.\n#### 12", 12, 1.0),
    ("#### 13", 12, 0.05),
    ("12", 12, 1.0),
    ("I think it is 11", 12, 0.0),
    ("", 12, 0.0),
    ("no digits here", 12, 0.0),
    ("####", 12, 0.0),
    ("#### twelve", 12, 0.0),
    ("#### 12.0", 12, 1.0),
    ("#### 12.0000001", 12, 1.0),
    ("#### 12.01", 12, 0.05),
    ("#### $1,234", 1234, 1.0),
    ("#### 50%", 50, 1.0),
    ("#### -3", -3, 1.0),
    ("#### 5 then #### 12", 12, 1.0),
    ("#### 12 then #### 5", 12, 0.05),
    ("Question: what is 3 + 4? Answer: 7\nQuestion: what is 2 + 2? Answer: 4", 7, 0.0),
    ("#### 4\n\nQuestion: what is 2 + 2?\nAnswer: #### 4", 4, 1.0),
    ("12 #### ", 12, 1.0),
]


@dataclass
class PropertyResult:
    name: str
    tolerance: float
    checks: int = 0
    failures: int = 0
    worst_residual: float = 0.0

    @property
    def passed(self):
        return self.checks > 0 and self.failures == 0

    def check(self, residual, ok=None):
        self.checks += 1
        if ok is None:
            ok = residual <= self.tolerance
        if not ok:
            self.failures += 1
        if math.isfinite(residual):
            self.worst_residual = max(self.worst_residual, residual)
        else:
            self.worst_residual = math.inf

    def as_row(self):
        return {
            'property': self.name,
            'checks': self.checks,
            'failures': self.failures,
            'worst_residual': self.worst_residual,
            'tolerance': self.tolerance,
            'status': 'PASS' if self.passed else 'FAIL',
        }


class VerificationService:
    """
    Randomised property suites over every module. Each suite returns a
    PropertyResult; `run` collects them in a fixed order.
    """

    def __init__(self, trials=10000, seed=0):
        if trials < 1:
            raise ValueError(f"trials must be positive, got {trials}")
        self.trials = trials
        self.seed = seed

    def _rng(self, suite):
        return np.random.default_rng(derive_seed(self.seed, suite))

    @staticmethod
    def _random_distribution(rng, size, allow_zeros=True):
        kind = rng.random()
        if allow_zeros and kind < 0.05:
            probs = np.zeros(size)
            probs[rng.integers(size)] = 1.0
            return probs
        probs = rng.dirichlet(np.full(size, rng.uniform(0.1 if allow_zeros else 0.5, 3.0)))
        if allow_zeros and kind < 0.2:
            mask = rng.random(size) < 0.3
            mask[rng.integers(size)] = False
            probs[mask] = 0.0
        return probs / probs.sum()

    def suites(self):
        return [
            self.tv_contraction,
            self.tv_monotone_in_alpha,
            self.kl_forward_bound,
            self.kl_forward_strict,
            self.kl_reverse_bound,
            self.ratio_contraction,
            self.pspo_slope,
            self.overconfidence_bound,
            self.overconfidence_strict,
            self.surrogate_identity,
            self.gradient_identity,
            self.gradient_vs_finite_differences,
            self.first_pass_ratio,
            self.advantage_zero_sum,
            self.bandit_monte_carlo,
            self.reward_golden,
        ]

    def run(self):
        results = []
        for suite in self.suites():
            result = suite()
            level = logging.INFO if result.passed else logging.ERROR
            logger.log(level, f"{result.name}: {result.checks - result.failures}/{result.checks} passed, "
                              f"worst residual {result.worst_residual:.3g}")
            results.append(result)
        return results

    # -- divergence ---------------------------------------------------------------

    def tv_contraction(self):
        result = PropertyResult('tv_contraction', 1e-12)
        rng = self._rng('tv')
        for _ in range(self.trials):
            size = int(rng.integers(2, 65))
            p, q = self._random_distribution(rng, size), self._random_distribution(rng, size)
            alpha = rng.random()
            smoothed = smooth_distribution(p, q, alpha)
            result.check(abs(tv_distance(smoothed, q) - (1.0 - alpha) * tv_distance(p, q)))
        return result

    def tv_monotone_in_alpha(self):
        result = PropertyResult('tv_monotone_in_alpha', 1e-14)
        rng = self._rng('tv-monotone')
        for _ in range(self.trials):
            size = int(rng.integers(2, 65))
            p, q = self._random_distribution(rng, size), self._random_distribution(rng, size)
            low, high = np.sort(rng.random(2))
            gap = tv_distance(smooth_distribution(p, q, high), q) - tv_distance(smooth_distribution(p, q, low), q)
            result.check(max(gap, 0.0))
        return result

    def kl_forward_bound(self):
        result = PropertyResult('kl_forward_bound', 1e-12)
        rng = self._rng('kl-forward')
        for _ in range(self.trials):
            size = int(rng.integers(2, 65))
            p, q = self._random_distribution(rng, size), self._random_distribution(rng, size)
            alpha = rng.random()
            bound = scaled_bound(kl_divergence(p, q), 1.0 - alpha)
            value = kl_divergence(smooth_distribution(p, q, alpha), q)
            result.check(0.0 if math.isinf(bound) else max(value - bound, 0.0))
        return result

    def kl_forward_strict(self):
        """Strict forward inequality on non-degenerate samples; passes when at least 99% are strict."""
        result = PropertyResult('kl_forward_strict', 0.01)
        rng = self._rng('kl-strict')
        strict, total = 0, 0
        for _ in range(self.trials):
            size = int(rng.integers(2, 65))
            p = self._random_distribution(rng, size, allow_zeros=False)
            q = self._random_distribution(rng, size, allow_zeros=False)
            alpha = rng.uniform(0.01, 0.99)
            if tv_distance(p, q) < 1e-3:
                continue
            total += 1
            strict += kl_divergence(smooth_distribution(p, q, alpha), q) < (1.0 - alpha) * kl_divergence(p, q)
        miss_rate = 1.0 - strict / total if total else 1.0
        result.check(miss_rate)
        return result

    def kl_reverse_bound(self):
        result = PropertyResult('kl_reverse_bound', 1e-12)
        rng = self._rng('kl-reverse')
        for _ in range(self.trials):
            size = int(rng.integers(2, 65))
            p, q = self._random_distribution(rng, size), self._random_distribution(rng, size)
            alpha = rng.random()
            bound = scaled_bound(kl_divergence(q, p), 1.0 - alpha)
            value = kl_divergence(q, smooth_distribution(p, q, alpha))
            result.check(0.0 if math.isinf(bound) else max(value - bound, 0.0))
        return result

    # -- ratios and slopes ---------------------------------------------------------

    def ratio_contraction(self):
        result = PropertyResult('ratio_contraction', 1e-12)
        rng = self._rng('ratio')
        for _ in range(self.trials):
            r, alpha = rng.uniform(0.0, 10.0), rng.random()
            result.check(abs(abs(smoothed_ratio(r, alpha) - 1.0) - (1.0 - alpha) * abs(r - 1.0)))
        return result

    def pspo_slope(self):
        result = PropertyResult('pspo_slope', 1e-8)
        rng = self._rng('slope')
        h = 1e-6
        for _ in range(max(1, self.trials // 10)):
            advantage, alpha = rng.uniform(-2.0, 2.0), rng.random()
            for r in (0.1, 1.0, 5.0):
                slope = (pspo_term(r + h, advantage, alpha) - pspo_term(r - h, advantage, alpha)) / (2 * h)
                result.check(abs(slope - (1.0 - alpha) * advantage))
        return result

    def overconfidence_bound(self):
        result = PropertyResult('overconfidence_bound', 1e-15)
        rng = self._rng('overconfidence')
        for _ in range(self.trials):
            p, q, alpha = rng.random(), rng.random(), rng.random()
            result.check(max(smooth_prob(p, q, alpha) - max(p, q), 0.0))
        return result

    def overconfidence_strict(self):
        result = PropertyResult('overconfidence_strict', 0.0)
        rng = self._rng('overconfidence-strict')
        for _ in range(self.trials):
            q = rng.uniform(0.0, 0.9)
            p = rng.uniform(q + 1e-6, 1.0)
            alpha = rng.uniform(0.01, 0.99)
            value = smooth_prob(p, q, alpha)
            result.check(max(value - p, 0.0), ok=value < p)
        return result

    # -- per-state identities --------------------------------------------------------

    def surrogate_identity(self):
        result = PropertyResult('surrogate_identity', 1e-12)
        rng = self._rng('identity')
        for _ in range(self.trials):
            size = int(rng.integers(2, 33))
            p_cur = softmax(rng.normal(size=size))
            p_old = softmax(rng.normal(size=size))
            advantages = rng.uniform(-1.0, 1.0, size=size)
            alpha = rng.random()
            expected = (1.0 - alpha) * float(p_cur @ advantages) + alpha * float(p_old @ advantages)
            result.check(abs(state_surrogate(p_cur, p_old, advantages, alpha) - expected))
        return result

    def gradient_identity(self):
        result = PropertyResult('gradient_identity', 1e-12)
        rng = self._rng('gradient-identity')
        for _ in range(self.trials):
            size = int(rng.integers(2, 33))
            logits = rng.normal(size=size)
            p_old = softmax(rng.normal(size=size))
            advantages = rng.uniform(-1.0, 1.0, size=size)
            alpha = rng.random()
            analytic = state_surrogate_gradient(logits, p_old, advantages, alpha)
            scaled = (1.0 - alpha) * on_policy_advantage_gradient(logits, advantages)
            result.check(float(np.max(np.abs(analytic - scaled))))
        return result

    def gradient_vs_finite_differences(self):
        """objective_gradient against central differences on sampled arithmetic groups, every mode."""
        result = PropertyResult('gradient_vs_finite_differences', 1e-6)
        rng = self._rng('fd')
        configs = [
            SurrogateConfig.for_mode('clip', epsilon=0.2),
            SurrogateConfig.for_mode('pspo', alpha=0.3),
            SurrogateConfig.for_mode('pspo', alpha=0.2, smoothing_target='uniform', token_aggregation='sum'),
            SurrogateConfig.for_mode('pspo', alpha=0.1, beta=0.05),
            SurrogateConfig.for_mode('pspo', alpha=0.25, smoothing_target='ref'),
            SurrogateConfig.for_mode('raw'),
        ]
        for trial in range(max(1, self.trials // 1000)):
            task = ArithmeticTask((int(rng.integers(10)), int(rng.integers(10))), max_len=3)
            old = TabularPolicy(task.vocab_size)
            states = [StateKey(task.prompt_id)] + [StateKey(task.prompt_id, (a,)) for a in range(task.vocab_size)]
            for state in states:
                old.set_logits(state, rng.normal(scale=1.5, size=task.vocab_size))
            batch = sample_group(task, old, group_size=4, temperature=1.0, seed=derive_seed(self.seed, 'fd', trial))
            if not np.any(batch.advantages):
                batch = replace(batch, advantages=rng.uniform(-1.0, 1.0, size=batch.group_size))
            reference = old.snapshot()
            for state in batch_states(batch):
                reference.add_to_logits(state, rng.normal(scale=0.5, size=task.vocab_size))
            for cfg in configs:
                cur = old.snapshot()
                for state in batch_states(batch):
                    cur.add_to_logits(state, rng.normal(scale=0.3, size=task.vocab_size))
                tokens = list(iter_token_terms(batch, cur, old, reference, cfg))
                if cfg.mode == 'clip' and any(
                    min(abs(t.ratio - (1 - cfg.epsilon)), abs(t.ratio - (1 + cfg.epsilon))) < 1e-4 for t in tokens
                ):
                    continue
                analytic = objective_gradient(batch, cur, old, cfg, reference)
                numeric = finite_diff_gradient(
                    lambda policy: group_objective(batch, policy, old, reference, cfg),
                    cur, sorted(analytic),
                )
                scale = max(1.0, max(float(np.max(np.abs(v))) for v in numeric.values()))
                residual = max(float(np.max(np.abs(analytic[s] - numeric[s]))) for s in analytic) / scale
                result.check(residual)
        return result

    # -- rollouts and rewards --------------------------------------------------------

    def first_pass_ratio(self):
        result = PropertyResult('first_pass_ratio', 1e-9)
        rng = self._rng('first-pass')
        for trial in range(max(1, self.trials // 100)):
            task = ArithmeticTask((int(rng.integers(10)), int(rng.integers(10))))
            policy = TabularPolicy(task.vocab_size)
            policy.set_logits(StateKey(task.prompt_id), rng.normal(size=task.vocab_size))
            episode = rollout(task, policy, temperature=rng.uniform(0.2, 1.5), seed=trial)
            recomputed = np.array([
                log_softmax(policy.logits(state))[action] for state, action in zip(episode.states, episode.actions)
            ])
            ratios = np.exp(recomputed - episode.old_logprobs)
            result.check(float(np.max(np.abs(ratios - 1.0))))
        return result

    def advantage_zero_sum(self):
        result = PropertyResult('advantage_zero_sum', 1e-12)
        rng = self._rng('advantages')
        for _ in range(self.trials):
            rewards = rng.choice([0.0, 0.05, 1.0], size=int(rng.integers(1, 17)))
            result.check(abs(float(group_advantages(rewards).sum())))
        return result

    def bandit_monte_carlo(self):
        """Exact bandit expectation of the smoothed surrogate against a 5-sigma Monte-Carlo band."""
        result = PropertyResult('bandit_monte_carlo', 5.0)
        rng = self._rng('bandit')
        for _ in range(max(1, self.trials // 200)):
            arms = int(rng.integers(2, 9))
            task = BanditTask(tuple(rng.uniform(-1.0, 1.0, size=arms)))
            old = TabularPolicy(arms, {StateKey(0): rng.normal(size=arms)})
            cur = TabularPolicy(arms, {StateKey(0): rng.normal(size=arms)})
            alpha = rng.random()
            p_old, p_cur = old.probs(StateKey(0)), cur.probs(StateKey(0))

            def term(a):
                return smoothed_ratio(p_cur[a] / p_old[a], alpha) * task.advantage_table[a]

            exact = bandit_expectation(task, old, term)
            draws = rng.choice(arms, size=4000, p=p_old)
            values = np.array([term(a) for a in draws])
            sigma = values.std(ddof=1) / math.sqrt(values.size)
            z = abs(values.mean() - exact) / sigma if sigma > 0 else abs(values.mean() - exact)
            result.check(z)
        return result

    def reward_golden(self):
        result = PropertyResult('reward_golden', 0.0)
        for text, gold, expected in GOLDEN_COMPLETIONS:
            score = grade_completion(text, gold).score
            result.check(abs(score - expected))
        return result
