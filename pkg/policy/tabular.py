"""
Tabular softmax policies keyed by (prompt, prefix) states.

Every state owns one logit per action; unvisited states fall back to
zero logits, i.e. the uniform policy, so every probability stays positive.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd


@dataclass(frozen=True, order=True)
class StateKey:
    """A prompt plus the tokens emitted so far."""
    prompt_id: int
    prefix: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, 'prompt_id', int(self.prompt_id))
        object.__setattr__(self, 'prefix', tuple(int(a) for a in self.prefix))

    def child(self, action):
        return StateKey(self.prompt_id, self.prefix + (int(action),))

    def encode(self):
        return f"{self.prompt_id}|{','.join(str(a) for a in self.prefix)}"

    @classmethod
    def decode(cls, text):
        prompt_part, _, prefix_part = text.partition('|')
        prefix = tuple(int(a) for a in prefix_part.split(',')) if prefix_part else ()
        return cls(int(prompt_part), prefix)

    def __str__(self):
        return self.encode()


def softmax(logits):
    shifted = np.asarray(logits, dtype=np.float64) - np.max(logits)
    weights = np.exp(shifted)
    return weights / weights.sum()


def log_softmax(logits):
    shifted = np.asarray(logits, dtype=np.float64) - np.max(logits)
    return shifted - np.log(np.exp(shifted).sum())


class TabularPolicy:
    """
    Sparse map from StateKey to a logit vector over a fixed vocabulary.

    Reads never mutate the map. Only `set_logits` / `add_to_logits`
    (called by the optimizer step or by test fixtures) write to it.
    """

    def __init__(self, vocab_size, params=None):
        if int(vocab_size) < 2:
            raise ValueError(f"vocab_size must be at least 2, got {vocab_size}")
        self.vocab_size = int(vocab_size)
        self.default_logits = np.zeros(self.vocab_size)
        self.default_logits.flags.writeable = False
        self._params = {}
        for state, logits in (params or {}).items():
            self.set_logits(state, logits)

    def __len__(self):
        return len(self._params)

    def __contains__(self, state):
        return state in self._params

    def __repr__(self):
        return f"TabularPolicy(vocab_size={self.vocab_size}, states={len(self._params)})"

    def logits(self, state):
        return self._params.get(state, self.default_logits)

    def probs(self, state):
        return softmax(self.logits(state))

    def log_probs(self, state):
        return log_softmax(self.logits(state))

    def touched_states(self):
        return sorted(self._params)

    def set_logits(self, state, logits):
        values = np.array(logits, dtype=np.float64)
        if values.shape != (self.vocab_size,):
            raise ValueError(
                f"Expected {self.vocab_size} logits for state {state}, got shape {values.shape}"
            )
        self._params[state] = values

    def add_to_logits(self, state, delta):
        current = self._params.get(state)
        if current is None:
            current = self.default_logits.copy()
            self._params[state] = current
        current += delta

    def snapshot(self):
        """Deep copy, used to freeze the behaviour policy before each batch."""
        clone = TabularPolicy(self.vocab_size)
        clone._params = {state: values.copy() for state, values in self._params.items()}
        return clone

    def same_parameters(self, other):
        if self.vocab_size != other.vocab_size:
            return False
        states = set(self._params) | set(other._params)
        return all(np.array_equal(self.logits(s), other.logits(s)) for s in states)

    # -- portable key/value table -------------------------------------------------

    def to_frame(self):
        rows = [
            {'state': state.encode(), 'logits': ' '.join(repr(float(v)) for v in self._params[state])}
            for state in self.touched_states()
        ]
        return pd.DataFrame(rows, columns=['state', 'logits'])

    @classmethod
    def from_frame(cls, frame, vocab_size):
        policy = cls(vocab_size)
        for row in frame.itertuples(index=False):
            policy.set_logits(StateKey.decode(row.state), [float(v) for v in row.logits.split()])
        return policy

    def save(self, path):
        frame = self.to_frame()
        with open(path, 'w', encoding='utf-8', newline='') as handle:
            handle.write(f"# vocab_size={self.vocab_size}\n")
            frame.to_csv(handle, sep='\t', index=False, lineterminator='\n')

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path, encoding='utf-8') as handle:
            header = handle.readline().strip()
            if not header.startswith('# vocab_size='):
                raise ValueError(f"{path} is not a policy table (missing vocab_size header)")
            vocab_size = int(header.split('=', 1)[1])
            frame = pd.read_csv(handle, sep='\t', dtype=str, keep_default_na=False)
        return cls.from_frame(frame, vocab_size)
