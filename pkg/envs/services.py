"""
Toy tasks with the shape of the fine-tuning pipeline: prompt in, token
sequence out, terminal graded reward. Small enough for exact policies and
exhaustive oracles.
"""

from dataclasses import dataclass
import logging
import math
from pathlib import Path
import re
from typing import Optional

import numpy as np
import pandas as pd

from common.seeding import derive_seed
from policy.tabular import StateKey, TabularPolicy, log_softmax, softmax
from rewards.services import DEFAULT_TOLERANCE, build_group_batch, grade_completion

logger = logging.getLogger(__name__)

# Token 10 is the whole answer marker, so "#### dd" fits in max_len tokens
ARITHMETIC_VOCAB = ('0', '1', '2', '3', '4', '5', '6', '7', '8', '9', '####', ' ', '<end>')
MARKER_TOKEN = 10
SPACE_TOKEN = 11
END_TOKEN = 12
DEFAULT_MAX_LEN = 6

LOGPROB_CONVENTIONS = ('policy', 'sampler')
_TOKEN_RE = re.compile(r"####|.", re.DOTALL)
TASKSET_COLUMNS = ['prompt_id', 'a', 'b', 'gold', 'split']


@dataclass(frozen=True)
class ArithmeticTask:
    """Add two digits; the answer is graded with the correctness-plus-format reward."""
    operands: tuple
    max_len: int = DEFAULT_MAX_LEN
    prompt_id: Optional[int] = None

    def __post_init__(self):
        a, b = (int(x) for x in self.operands)
        if not (0 <= a <= 9 and 0 <= b <= 9):
            raise ValueError(f"operands must lie in [0, 9], got {self.operands}")
        if self.max_len < 1:
            raise ValueError(f"max_len must be positive, got {self.max_len}")
        object.__setattr__(self, 'operands', (a, b))
        if self.prompt_id is None:
            # Identical problems share one prompt (and so one set of policy states)
            object.__setattr__(self, 'prompt_id', 10 * a + b)

    @property
    def gold(self):
        return float(self.operands[0] + self.operands[1])

    @property
    def vocab_size(self):
        return len(ARITHMETIC_VOCAB)

    def is_terminal(self, actions):
        return len(actions) >= self.max_len or (len(actions) > 0 and actions[-1] == END_TOKEN)

    def render(self, actions):
        return ''.join(ARITHMETIC_VOCAB[a] for a in actions if a != END_TOKEN)

    def tokenize(self, text):
        try:
            return [ARITHMETIC_VOCAB.index(piece) for piece in _TOKEN_RE.findall(text)]
        except ValueError:
            raise ValueError(f"{text!r} contains characters outside the arithmetic vocabulary") from None

    def evaluate(self, actions, tolerance=DEFAULT_TOLERANCE):
        outcome = grade_completion(self.render(actions), self.gold, tolerance=tolerance)
        return outcome.score, outcome

    def is_success(self, actions, tolerance=DEFAULT_TOLERANCE):
        return self.evaluate(actions, tolerance)[0] == 1.0


@dataclass(frozen=True)
class BanditTask:
    """Single-step task: pulling arm a pays advantage_table[a]."""
    advantage_table: tuple
    prompt_id: int = 0

    def __post_init__(self):
        table = tuple(float(v) for v in self.advantage_table)
        if len(table) < 2:
            raise ValueError("a bandit needs at least two arms")
        if not all(math.isfinite(v) for v in table):
            raise ValueError("bandit rewards must be finite")
        object.__setattr__(self, 'advantage_table', table)

    @property
    def num_actions(self):
        return len(self.advantage_table)

    @property
    def vocab_size(self):
        return self.num_actions

    @property
    def max_len(self):
        return 1

    def is_terminal(self, actions):
        return len(actions) >= 1

    def render(self, actions):
        return ' '.join(str(a) for a in actions)

    def evaluate(self, actions, tolerance=DEFAULT_TOLERANCE):
        return self.advantage_table[actions[0]], None

    def is_success(self, actions, tolerance=DEFAULT_TOLERANCE):
        return self.advantage_table[actions[0]] == max(self.advantage_table)


@dataclass(frozen=True, eq=False)
class Episode:
    prompt_id: int
    states: tuple
    actions: tuple
    old_logprobs: np.ndarray
    rendered: str

    def __len__(self):
        return len(self.actions)


def sampling_distribution(logits, temperature, top_p=1.0):
    """softmax(logits / T), truncated to the smallest nucleus of mass >= top_p."""
    probs = softmax(np.asarray(logits) / temperature)
    if top_p < 1.0:
        order = np.argsort(-probs, kind='stable')
        sorted_probs = probs[order]
        keep = (np.cumsum(sorted_probs) - sorted_probs) < top_p
        mask = np.zeros_like(probs, dtype=bool)
        mask[order[keep]] = True
        probs = np.where(mask, probs, 0.0)
        probs /= probs.sum()
    return probs


def rollout(task, policy, temperature=1.0, seed=0, top_p=1.0, logprob_convention='policy'):
    """
    Sample one completion token by token (greedy argmax at temperature 0).

    With the 'policy' convention the recorded log-probabilities are those of the
    untempered policy, so the first-pass ratio against the snapshot is exactly 1;
    'sampler' records the tempered, nucleus-truncated sampling distribution.
    """
    if temperature < 0:
        raise ValueError(f"temperature must be non-negative, got {temperature}")
    if not 0.0 < top_p <= 1.0:
        raise ValueError(f"top_p must lie in (0, 1], got {top_p}")
    if logprob_convention not in LOGPROB_CONVENTIONS:
        raise ValueError(f"logprob_convention must be one of {LOGPROB_CONVENTIONS}")
    if policy.vocab_size != task.vocab_size:
        raise ValueError(f"policy vocabulary {policy.vocab_size} does not match task vocabulary {task.vocab_size}")

    rng = np.random.default_rng(seed)
    state = StateKey(task.prompt_id)
    states, actions, logprobs = [], [], []
    while not task.is_terminal(actions):
        logits = policy.logits(state)
        if temperature == 0:
            action = int(np.argmax(logits))
            sampler_logprob = 0.0
        else:
            sampling = sampling_distribution(logits, temperature, top_p)
            action = int(rng.choice(task.vocab_size, p=sampling))
            sampler_logprob = float(np.log(sampling[action]))
        if logprob_convention == 'policy':
            logprobs.append(float(log_softmax(logits)[action]))
        else:
            logprobs.append(sampler_logprob)
        states.append(state)
        actions.append(action)
        state = state.child(action)

    return Episode(
        prompt_id=task.prompt_id,
        states=tuple(states),
        actions=tuple(actions),
        old_logprobs=np.array(logprobs),
        rendered=task.render(actions),
    )


def sample_group(task, policy, group_size=4, temperature=1.0, seed=0, top_p=1.0,
                 logprob_convention='policy', normalize_advantage=False, tolerance=DEFAULT_TOLERANCE):
    """G independent rollouts for one prompt, graded and mean-centred into a GroupBatch."""
    if group_size < 1:
        raise ValueError(f"group_size must be positive, got {group_size}")
    episodes = [
        rollout(
            task, policy, temperature,
            seed=derive_seed(seed, task.prompt_id, index),
            top_p=top_p,
            logprob_convention=logprob_convention,
        )
        for index in range(group_size)
    ]
    graded = [task.evaluate(episode.actions, tolerance) for episode in episodes]
    rewards = np.array([reward for reward, _ in graded])
    outcomes = tuple(outcome for _, outcome in graded)
    return build_group_batch(task.prompt_id, episodes, rewards, normalize=normalize_advantage, outcomes=outcomes)


def evaluate_greedy(tasks, policy, tolerance=DEFAULT_TOLERANCE):
    """Top-1 accuracy at temperature 0."""
    if not tasks:
        raise ValueError("evaluate_greedy needs a non-empty task set")
    hits = sum(task.is_success(rollout(task, policy, temperature=0).actions, tolerance) for task in tasks)
    return hits / len(tasks)


def evaluate_sampled(tasks, policy, temperature, seed=0, top_p=1.0, tolerance=DEFAULT_TOLERANCE):
    """Top-1 accuracy of a single sample per prompt at a non-zero temperature."""
    if not tasks:
        raise ValueError("evaluate_sampled needs a non-empty task set")
    hits = 0
    for index, task in enumerate(tasks):
        episode = rollout(task, policy, temperature, seed=derive_seed(seed, 'eval', index), top_p=top_p)
        hits += task.is_success(episode.actions, tolerance)
    return hits / len(tasks)


def bandit_expectation(task, policy, fn):
    """Exact E_{a ~ policy}[fn(a)] for a single-step task."""
    probs = policy.probs(StateKey(task.prompt_id))
    return float(sum(probs[a] * fn(a) for a in range(task.num_actions)))


def scripted_policy(tasks, completion_for, strength=12.0):
    """
    Policy whose greedy output for each task is completion_for(task), followed by
    the end token when there is room.
    """
    policy = TabularPolicy(tasks[0].vocab_size)
    for task in tasks:
        tokens = task.tokenize(completion_for(task))
        if len(tokens) < task.max_len:
            tokens.append(END_TOKEN)
        state = StateKey(task.prompt_id)
        for token in tokens[:task.max_len]:
            logits = np.zeros(task.vocab_size)
            logits[token] = strength
            policy.set_logits(state, logits)
            state = state.child(token)
    return policy


# -- tasksets -----------------------------------------------------------------------

def make_taskset(n_train=200, n_eval=50, seed=0, max_len=DEFAULT_MAX_LEN):
    if n_train < 1 or n_eval < 1:
        raise ValueError("both splits need at least one prompt")
    rng = np.random.default_rng(seed)
    operands = rng.integers(0, 10, size=(n_train + n_eval, 2))
    tasks = [ArithmeticTask((int(a), int(b)), max_len=max_len) for a, b in operands]
    return tasks[:n_train], tasks[n_train:]


def write_taskset(path, train_tasks, eval_tasks):
    rows = [
        {'prompt_id': task.prompt_id, 'a': task.operands[0], 'b': task.operands[1],
         'gold': int(task.gold), 'split': split}
        for split, tasks in (('train', train_tasks), ('eval', eval_tasks))
        for task in tasks
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=TASKSET_COLUMNS).to_csv(path, sep='\t', index=False, lineterminator='\n')
    logger.info(f"Wrote taskset with {len(train_tasks)} train / {len(eval_tasks)} eval prompts to {path}")


def read_taskset(path, max_len=DEFAULT_MAX_LEN):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Taskset file not found: {path}")
    df = pd.read_csv(path, sep='\t', dtype=str).fillna('')

    missing_columns = [col for col in TASKSET_COLUMNS if col not in df.columns]
    if missing_columns:
        raise ValueError(f"Missing required columns: {', '.join(missing_columns)}")

    splits = {'train': [], 'eval': []}
    for index, row in df.iterrows():
        task = ArithmeticTask((int(row['a']), int(row['b'])), max_len=max_len, prompt_id=int(row['prompt_id']))
        if task.gold != float(row['gold']):
            raise ValueError(f"Row {index + 2}: gold {row['gold']} does not equal {row['a']} + {row['b']}")
        if row['split'] not in splits:
            raise ValueError(f"Row {index + 2}: unknown split {row['split']!r}")
        splits[row['split']].append(task)
    return splits['train'], splits['eval']
