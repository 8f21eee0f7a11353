"""
Exact divergences between categorical distributions.

Used to check the total-variation contraction and KL bounds of probability
smoothing, and to log soft trust-region radii while training.
"""

from dataclasses import dataclass
import logging
import math

import numpy as np

logger = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class Categorical:
    probs: np.ndarray

    def __post_init__(self):
        values = np.array(self.probs, dtype=np.float64)
        if values.ndim != 1 or values.size < 2:
            raise ValueError(f"Categorical needs a vector of length >= 2, got shape {values.shape}")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("Categorical probabilities must be finite and non-negative")
        if abs(values.sum() - 1.0) > SUM_TOLERANCE * values.size:
            raise ValueError(f"Categorical probabilities sum to {values.sum():.17g}, expected 1")
        values.flags.writeable = False
        object.__setattr__(self, 'probs', values)

    def __len__(self):
        return self.probs.size


def _as_probs(dist):
    if isinstance(dist, Categorical):
        return dist.probs
    return np.asarray(dist, dtype=np.float64)


def _pair(p, q):
    p, q = _as_probs(p), _as_probs(q)
    if p.shape != q.shape:
        raise ValueError(f"Distributions have different lengths: {p.size} vs {q.size}")
    return p, q


def l1_distance(p, q):
    p, q = _pair(p, q)
    return float(np.abs(p - q).sum())


def tv_distance(p, q):
    return 0.5 * l1_distance(p, q)


def kl_divergence(p, q):
    """sum_a p_a ln(p_a / q_a), with 0 ln(0/q) = 0 and +inf wherever p_a > 0 = q_a."""
    p, q = _pair(p, q)
    support = p > 0
    if np.any(q[support] == 0):
        return math.inf
    value = float(np.sum(p[support] * np.log(p[support] / q[support])))
    return max(value, 0.0)


def smooth_distribution(p, q, alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    p, q = _pair(p, q)
    return Categorical((1.0 - alpha) * p + alpha * q)


def scaled_bound(bound, factor):
    """factor * bound with 0 * inf taken as 0 (the bound of a fully anchored policy)."""
    if factor == 0:
        return 0.0
    return factor * bound


@dataclass(frozen=True)
class DivergenceSummary:
    tv_mean: float
    kl_mean: float
    n_states: int


def state_diagnostics(cur, old, states):
    """Mean TV and KL(pi_theta || pi_old) over the distinct states visited in a batch."""
    states = sorted(set(states))
    if not states:
        return DivergenceSummary(0.0, 0.0, 0)
    tv_values = []
    kl_values = []
    for state in states:
        p, q = cur.probs(state), old.probs(state)
        tv_values.append(tv_distance(p, q))
        kl_values.append(kl_divergence(p, q))
    return DivergenceSummary(float(np.mean(tv_values)), float(np.mean(kl_values)), len(states))
