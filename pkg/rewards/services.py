"""
Correctness-plus-format reward and the group-relative advantage baseline.
"""

from dataclasses import dataclass
import logging
import math
import re
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-6
DEFAULT_FORMAT_BONUS = 0.05
ANSWER_MARKER = '####'

SOURCE_FORMAT_MATCH = 'format_match'
SOURCE_LAST_TOKEN = 'last_token_fallback'
SOURCE_NONE = 'none'
SOURCES = (SOURCE_FORMAT_MATCH, SOURCE_LAST_TOKEN, SOURCE_NONE)

# Optional sign, optional currency, digits (with or without thousands separators),
# optional decimals, optional percent sign.
NUMBER_PATTERN = r"[-+]?[$£€]?(?:\d{1,3}(?:,\d{3})+(?!\d)|\d+)(?:\.\d+)?%?"
_NUMBER_RE = re.compile(NUMBER_PATTERN)
_AFTER_MARKER_RE = re.compile(r"\s*(" + NUMBER_PATTERN + r")")
_STRIP_RE = re.compile(r"[$£€%,]")

NORMALIZE_EPS = 1e-4


@dataclass(frozen=True)
class RewardOutcome:
    score: float
    parsed_value: Optional[float]
    source: str

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"Unknown parse source {self.source!r}")
        if (self.parsed_value is None) != (self.source == SOURCE_NONE):
            raise ValueError("parsed_value must be present exactly when a number was parsed")


def parse_number(token):
    return float(_STRIP_RE.sub('', token))


def extract_answer(text):
    """
    Returns (value, source). The number right after the final '####' marker wins;
    otherwise the last numeric token anywhere in the text.
    """
    marker = text.rfind(ANSWER_MARKER)
    if marker >= 0:
        match = _AFTER_MARKER_RE.match(text, marker + len(ANSWER_MARKER))
        if match:
            return parse_number(match.group(1)), SOURCE_FORMAT_MATCH
    numbers = _NUMBER_RE.findall(text)
    if numbers:
        return parse_number(numbers[-1]), SOURCE_LAST_TOKEN
    return None, SOURCE_NONE


def grade_completion(text, gold, tolerance=DEFAULT_TOLERANCE, format_bonus=DEFAULT_FORMAT_BONUS):
    if not math.isfinite(gold):
        raise ValueError(f"gold answer must be finite, got {gold}")
    value, source = extract_answer(text)
    if value is None:
        return RewardOutcome(0.0, None, SOURCE_NONE)
    correct = math.isfinite(value) and abs(value - gold) <= tolerance
    bonus = format_bonus if source == SOURCE_FORMAT_MATCH else 0.0
    # Clamped to [0, 1]: the bonus never lifts a correct answer above 1
    score = min(1.0, (1.0 if correct else 0.0) + bonus)
    return RewardOutcome(score, value, source)


def group_advantages(rewards, normalize=False):
    """Rewards minus the group mean; optional division by (std + 1e-4) for ablations."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("group_advantages needs at least one reward")
    if np.all(rewards == rewards[0]):
        return np.zeros_like(rewards)
    advantages = rewards - rewards.mean()
    if normalize:
        advantages = advantages / (rewards.std() + NORMALIZE_EPS)
    return advantages


@dataclass(frozen=True, eq=False)
class GroupBatch:
    """One prompt's G sampled completions with behaviour log-probabilities, rewards and advantages."""
    prompt_id: int
    completions: tuple
    old_logprobs: tuple
    rewards: np.ndarray
    advantages: np.ndarray
    rendered: tuple = ()
    outcomes: tuple = ()

    def __post_init__(self):
        completions = tuple(tuple(int(a) for a in actions) for actions in self.completions)
        old_logprobs = tuple(np.asarray(lp, dtype=np.float64) for lp in self.old_logprobs)
        rewards = np.asarray(self.rewards, dtype=np.float64)
        advantages = np.asarray(self.advantages, dtype=np.float64)
        sizes = {len(completions), len(old_logprobs), rewards.size, advantages.size}
        if len(sizes) != 1:
            raise ValueError(
                f"GroupBatch fields disagree on group size: completions={len(completions)}, "
                f"old_logprobs={len(old_logprobs)}, rewards={rewards.size}, advantages={advantages.size}"
            )
        for i, (actions, logprobs) in enumerate(zip(completions, old_logprobs)):
            if len(actions) != logprobs.size:
                raise ValueError(f"completion {i} has {len(actions)} actions but {logprobs.size} log-probabilities")
        object.__setattr__(self, 'completions', completions)
        object.__setattr__(self, 'old_logprobs', old_logprobs)
        object.__setattr__(self, 'rewards', rewards)
        object.__setattr__(self, 'advantages', advantages)
        object.__setattr__(self, 'rendered', tuple(self.rendered))
        object.__setattr__(self, 'outcomes', tuple(self.outcomes))

    @property
    def group_size(self):
        return len(self.completions)

    @property
    def n_tokens(self):
        return sum(len(actions) for actions in self.completions)

    @property
    def mean_reward(self):
        return float(self.rewards.mean())


def build_group_batch(prompt_id, episodes, rewards, normalize=False, outcomes=()):
    advantages = group_advantages(rewards, normalize=normalize)
    return GroupBatch(
        prompt_id=prompt_id,
        completions=tuple(episode.actions for episode in episodes),
        old_logprobs=tuple(episode.old_logprobs for episode in episodes),
        rewards=rewards,
        advantages=advantages,
        rendered=tuple(episode.rendered for episode in episodes),
        outcomes=outcomes,
    )
