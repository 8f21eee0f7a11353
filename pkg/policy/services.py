"""
Policy-core services: probability smoothing, importance ratios, the clipped and
smoothed surrogate terms, and the group objective with its exact gradient.
"""

from dataclasses import asdict, dataclass
import logging
import math

import numpy as np

from common.exceptions import ConfigurationError, OffPolicyBatchError, UndefinedRatioError
from divergence.services import kl_divergence
from .tabular import StateKey

logger = logging.getLogger(__name__)

MODES = ('clip', 'noclip', 'pspo', 'raw')
SMOOTHING_TARGETS = ('old', 'ref', 'uniform')
TOKEN_AGGREGATIONS = ('mean', 'sum')

# Passes over each batch per mode ("Number of Iterations" row of the hyperparameter table)
MODE_ITERATIONS = {'noclip': 1, 'clip': 2, 'pspo': 2, 'raw': 2}

# First-pass ratios must be 1 up to rounding for single-pass training
ON_POLICY_TOLERANCE = 1e-9


@dataclass(frozen=True)
class SurrogateConfig:
    mode: str = 'pspo'
    alpha: float = 0.1
    epsilon: float = 0.1
    beta: float = 0.0
    iterations_mu: int = 2
    token_aggregation: str = 'mean'
    smoothing_target: str = 'old'

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigurationError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.beta < 0.0:
            raise ConfigurationError(f"beta must be non-negative, got {self.beta}")
        if int(self.iterations_mu) < 1:
            raise ConfigurationError(f"iterations_mu must be positive, got {self.iterations_mu}")
        if self.token_aggregation not in TOKEN_AGGREGATIONS:
            raise ConfigurationError(
                f"token_aggregation must be one of {TOKEN_AGGREGATIONS}, got {self.token_aggregation!r}"
            )
        if self.smoothing_target not in SMOOTHING_TARGETS:
            raise ConfigurationError(
                f"smoothing_target must be one of {SMOOTHING_TARGETS}, got {self.smoothing_target!r}"
            )
        if self.mode == 'noclip' and self.iterations_mu != 1:
            logger.warning(f"mode=noclip trains single-pass; overriding iterations_mu={self.iterations_mu} to 1")
            object.__setattr__(self, 'iterations_mu', 1)

    @classmethod
    def for_mode(cls, mode, **overrides):
        values = {'mode': mode, 'iterations_mu': MODE_ITERATIONS.get(mode, 1)}
        values.update(overrides)
        return cls(**values)

    @property
    def needs_reference(self):
        return self.beta > 0 or (self.mode == 'pspo' and self.smoothing_target == 'ref')

    def to_dict(self):
        return asdict(self)


# -- scalar building blocks ---------------------------------------------------------

def _check_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


def action_prob(policy, state, action):
    if not 0 <= action < policy.vocab_size:
        raise ValueError(f"action {action} outside vocabulary of size {policy.vocab_size}")
    return float(policy.probs(state)[action])


def smooth_prob(p_cur, p_old, alpha):
    _check_alpha(alpha)
    return (1.0 - alpha) * p_cur + alpha * p_old


def importance_ratio(p_cur, p_old):
    if p_old == 0:
        raise UndefinedRatioError(f"importance ratio undefined: behaviour probability is 0 (p_cur={p_cur})")
    return p_cur / p_old


def smoothed_ratio(r, alpha, anchor=1.0):
    """(1 - alpha) * r + alpha * anchor; anchor = pi_target(a) / pi_old(a), 1 for the old policy."""
    return (1.0 - alpha) * r + alpha * anchor


def clipped_term(r, advantage, epsilon):
    return np.minimum(r * advantage, np.clip(r, 1.0 - epsilon, 1.0 + epsilon) * advantage)


def clipped_term_slope(r, advantage, epsilon):
    """d/dr of clipped_term; kinks take the unclipped side."""
    r = np.asarray(r, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    flat = ((advantage > 0) & (r > 1.0 + epsilon)) | ((advantage < 0) & (r < 1.0 - epsilon))
    slope = np.where(flat, 0.0, advantage * np.ones_like(r))
    return slope if slope.ndim else float(slope)


def pspo_term(r, advantage, alpha, anchor=1.0):
    return smoothed_ratio(r, alpha, anchor) * advantage


def pspo_term_slope(r, advantage, alpha):
    slope = (1.0 - alpha) * np.asarray(advantage, dtype=np.float64) * np.ones_like(np.asarray(r, dtype=np.float64))
    return slope if slope.ndim else float(slope)


def surrogate_term(r, advantage, cfg, anchor=1.0):
    if cfg.mode == 'clip':
        return float(clipped_term(r, advantage, cfg.epsilon))
    if cfg.mode == 'pspo':
        return pspo_term(r, advantage, cfg.alpha, anchor)
    return r * advantage


def surrogate_slope(r, advantage, cfg):
    if cfg.mode == 'clip':
        if (advantage > 0 and r > 1.0 + cfg.epsilon) or (advantage < 0 and r < 1.0 - cfg.epsilon):
            return 0.0
        return advantage
    if cfg.mode == 'pspo':
        return (1.0 - cfg.alpha) * advantage
    return advantage


# -- exhaustive per-state forms ------------------------------------------------------

def state_surrogate(p_cur, p_old, advantages, alpha):
    """E_{a~old}[smoothed_ratio(r(a)) A(a)] summed exactly over the vocabulary."""
    p_cur = np.asarray(p_cur, dtype=np.float64)
    p_old = np.asarray(p_old, dtype=np.float64)
    ratios = p_cur / p_old
    return float(np.sum(p_old * smoothed_ratio(ratios, alpha) * np.asarray(advantages)))


def state_surrogate_gradient(logits, p_old, advantages, alpha):
    """Logit gradient of `state_surrogate`, accumulated token by token through r."""
    probs = np.exp(logits - np.max(logits))
    probs /= probs.sum()
    ratios = probs / np.asarray(p_old)
    weights = np.asarray(p_old) * (1.0 - alpha) * np.asarray(advantages) * ratios
    return weights - probs * weights.sum()


def on_policy_advantage_gradient(logits, advantages):
    """Gradient of sum_a pi(a) A(a) with respect to the logits."""
    probs = np.exp(logits - np.max(logits))
    probs /= probs.sum()
    weighted = probs * np.asarray(advantages)
    return weighted - probs * weighted.sum()


# -- group objective -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TokenTerm:
    completion: int
    state: StateKey
    action: int
    probs: np.ndarray
    p_old: float
    ratio: float
    anchor: float
    advantage: float
    weight: float


def _anchor_probability(cfg, state, action, old, ref, vocab_size):
    if cfg.mode != 'pspo':
        return None
    if cfg.smoothing_target == 'uniform':
        return 1.0 / vocab_size
    if cfg.smoothing_target == 'ref':
        return float(ref.probs(state)[action])
    if old is not None:
        return float(old.probs(state)[action])
    return None


def iter_token_terms(batch, cur, old=None, ref=None, cfg=None):
    """Yield one TokenTerm per sampled token of the group, with its aggregation weight."""
    cfg = cfg or SurrogateConfig()
    group_size = len(batch.completions)
    cache = {}
    for i, actions in enumerate(batch.completions):
        n_tokens = len(actions)
        if n_tokens == 0:
            continue
        per_token = 1.0 / n_tokens if cfg.token_aggregation == 'mean' else 1.0
        weight = per_token / group_size
        advantage = float(batch.advantages[i])
        for t, action in enumerate(actions):
            state = StateKey(batch.prompt_id, actions[:t])
            probs = cache.get(state)
            if probs is None:
                probs = cache[state] = cur.probs(state)
            p_old = math.exp(batch.old_logprobs[i][t])
            ratio = importance_ratio(float(probs[action]), p_old)
            target = _anchor_probability(cfg, state, action, old, ref, cur.vocab_size)
            anchor = 1.0 if target is None else target / p_old
            yield TokenTerm(i, state, int(action), probs, p_old, ratio, anchor, advantage, weight)


def batch_states(batch):
    states = set()
    for actions in batch.completions:
        for t in range(len(actions)):
            states.add(StateKey(batch.prompt_id, actions[:t]))
    return sorted(states)


def _check_reference(cfg, ref):
    if cfg.needs_reference and ref is None:
        raise ConfigurationError("a reference policy is required when beta > 0 or smoothing_target='ref'")


def _check_on_policy(cfg, token):
    if cfg.mode == 'noclip' and abs(token.ratio - 1.0) > ON_POLICY_TOLERANCE:
        raise OffPolicyBatchError(
            f"mode=noclip requires on-policy batches; ratio {token.ratio:.12g} at state {token.state}"
        )


def reference_kl(cur, ref, states):
    """Mean over states of KL(pi_theta(.|s) || pi_ref(.|s)), summed exactly over the vocabulary."""
    if not states:
        return 0.0
    return float(np.mean([kl_divergence(cur.probs(s), ref.probs(s)) for s in states]))


def group_objective(batch, cur, old, ref, cfg):
    """
    (1/G) sum_i agg_t term(r_ti, A_i) - beta * mean_s KL(pi_theta || pi_ref).

    term is the clipped term, the smoothed-ratio term, or plain r * A for
    noclip/raw; agg_t is a token mean (default) or sum per completion.
    """
    _check_reference(cfg, ref)
    total = 0.0
    for token in iter_token_terms(batch, cur, old, ref, cfg):
        _check_on_policy(cfg, token)
        total += token.weight * surrogate_term(token.ratio, token.advantage, cfg, token.anchor)
    if cfg.beta > 0:
        total -= cfg.beta * reference_kl(cur, ref, batch_states(batch))
    return float(total)


def objective_gradient(batch, cur, old, cfg, ref=None):
    """
    Exact gradient of `group_objective` with respect to every logit the batch touches.

    Each token contributes slope(r, A) * r * (e_a - pi(.|s)); the slope is 0 on the
    clipped plateau, (1 - alpha) * A for pspo and A otherwise.
    """
    _check_reference(cfg, ref)
    gradient = {}
    for token in iter_token_terms(batch, cur, old, ref, cfg):
        _check_on_policy(cfg, token)
        slope = surrogate_slope(token.ratio, token.advantage, cfg)
        if slope == 0.0:
            continue
        contribution = -token.probs * (token.weight * slope * token.ratio)
        contribution[token.action] += token.weight * slope * token.ratio
        if token.state in gradient:
            gradient[token.state] += contribution
        else:
            gradient[token.state] = contribution
    if cfg.beta > 0:
        states = batch_states(batch)
        for state in states:
            probs = cur.probs(state)
            log_ratio = cur.log_probs(state) - ref.log_probs(state)
            kl_grad = probs * (log_ratio - float(np.dot(probs, log_ratio)))
            update = -cfg.beta * kl_grad / len(states)
            gradient[state] = gradient[state] + update if state in gradient else update
    for state in batch_states(batch):
        gradient.setdefault(state, np.zeros(cur.vocab_size))
    return gradient


def merge_gradients(gradients, scale=1.0):
    merged = {}
    for gradient in gradients:
        for state, values in gradient.items():
            if state in merged:
                merged[state] = merged[state] + scale * values
            else:
                merged[state] = scale * values
    return merged


@dataclass(frozen=True)
class RatioStats:
    max_ratio_dev: float
    smoothed_ratio_dev: float
    clip_fraction: float
    n_tokens: int


def ratio_statistics(batches, cur, old, ref, cfg):
    """max |r - 1| before smoothing/clipping, max |r~ - 1| after smoothing, and the clipped share."""
    max_dev = 0.0
    max_smoothed = 0.0
    clipped = 0
    n_tokens = 0
    for batch in batches:
        for token in iter_token_terms(batch, cur, old, ref, cfg):
            n_tokens += 1
            deviation = abs(token.ratio - 1.0)
            max_dev = max(max_dev, deviation)
            if cfg.mode == 'pspo':
                smoothed = smoothed_ratio(token.ratio, cfg.alpha, token.anchor)
                max_smoothed = max(max_smoothed, abs(smoothed - 1.0))
            else:
                max_smoothed = max(max_smoothed, deviation)
            if cfg.mode == 'clip' and surrogate_slope(token.ratio, token.advantage, cfg) == 0.0 and token.advantage != 0:
                clipped += 1
    return RatioStats(
        max_ratio_dev=max_dev,
        smoothed_ratio_dev=max_smoothed,
        clip_fraction=clipped / n_tokens if n_tokens else 0.0,
        n_tokens=n_tokens,
    )
