"""Adam with bias correction and optional decoupled weight decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


class Adam:
    """Adam over a fixed list of parameter tensors.

    ``weight_decay`` is applied decoupled from the moment estimates
    (``p -= lr * wd * p``) and only to parameters whose ``decay_mask`` entry
    is true. Gradients are cleared after every step.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8, weight_decay: float = 0.0,
                 decay_mask: Sequence[bool] | None = None):
        self.params = list(params)
        if weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        self.weight_decay = weight_decay
        if decay_mask is None:
            decay_mask = [True] * len(self.params)
        if len(decay_mask) != len(self.params):
            raise ValueError("decay_mask length must match params")
        self.decay_mask = list(decay_mask)
        self.state = AdamState(
            learning_rate=lr, beta1=beta1, beta2=beta2, epsilon=epsilon,
            first_moment=[np.zeros_like(p.data) for p in self.params],
            second_moment=[np.zeros_like(p.data) for p in self.params],
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        st = self.state
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            names = [self.params[i].name or f"#{i}" for i in missing]
            raise ValueError(f"missing gradient for parameters {names}")
        st.step_count += 1
        t = st.step_count
        bc1 = 1.0 - st.beta1 ** t
        bc2 = 1.0 - st.beta2 ** t
        step_size = st.learning_rate / bc1
        decay_rate = st.learning_rate * self.weight_decay
        for p, m, v, decay in zip(self.params, st.first_moment, st.second_moment, self.decay_mask):
            f = p.data.dtype.type
            _adam_update(p.data.reshape(-1), p.grad.reshape(-1), m.reshape(-1), v.reshape(-1),
                         f(st.beta1), f(1.0 - st.beta1), f(st.beta2), f(1.0 - st.beta2),
                         f(step_size), f(bc2), f(st.epsilon), f(decay_rate if decay else 0.0))
            p.grad = None


@numba.njit(cache=True, error_model="numpy")
def _adam_update(p, g, m, v, beta1, rest1, beta2, rest2, step_size, bc2, eps, decay_rate):
    # one fused pass over flat views; scalars arrive in the parameter dtype
    for i in range(p.size):
        gi = g[i]
        mi = beta1 * m[i] + rest1 * gi
        vi = beta2 * v[i] + rest2 * gi * gi
        m[i] = mi
        v[i] = vi
        pi = p[i] - decay_rate * p[i]
        p[i] = pi - step_size * mi / (math.sqrt(vi / bc2) + eps)
