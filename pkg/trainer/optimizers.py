"""
Gradient-ascent optimizers over sparse StateKey -> logit-vector maps.
"""

import numpy as np

OPTIMIZERS = ('sgd', 'adam')


class SGD:
    def __init__(self, learning_rate):
        self.learning_rate = learning_rate

    def step(self, policy, gradient):
        for state in sorted(gradient):
            policy.add_to_logits(state, self.learning_rate * gradient[state])


class Adam:
    """
    Adam with per-state moment estimates and step counts, so states that
    appear rarely get properly bias-corrected updates.
    """

    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = {}
        self._v = {}
        self._t = {}

    def step(self, policy, gradient):
        for state in sorted(gradient):
            grad = gradient[state]
            m = self.beta1 * self._m.get(state, 0.0) + (1.0 - self.beta1) * grad
            v = self.beta2 * self._v.get(state, 0.0) + (1.0 - self.beta2) * grad * grad
            t = self._t.get(state, 0) + 1
            self._m[state], self._v[state], self._t[state] = m, v, t
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            policy.add_to_logits(state, self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps))


def build_optimizer(name, learning_rate):
    if name == 'sgd':
        return SGD(learning_rate)
    if name == 'adam':
        return Adam(learning_rate)
    raise ValueError(f"Unknown optimizer {name!r}; expected one of {OPTIMIZERS}")
