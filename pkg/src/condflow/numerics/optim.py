"""Adam with bias correction, one moment pair per parameter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from condflow.errors import DimensionError
from condflow.numerics.tensor import Parameter


@dataclass
class AdamState:
    """First/second moment buffers and step counter for one parameter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_shape(cls, shape, dtype=np.float32, lr=1e-3, beta1=0.9,
                  beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(m=np.zeros(shape, dtype=dtype), v=np.zeros(shape, dtype=dtype),
                   t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(value: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One Adam update; mutates ``state`` and returns the new value."""
    if value.shape != grad.shape or value.shape != state.m.shape:
        raise DimensionError(
            f"adam_step shape mismatch: value {value.shape}, grad {grad.shape}, "
            f"state {state.m.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * (grad * grad)
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    return value - (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(value.dtype)


class Adam:
    """Convenience wrapper applying ``adam_step`` to a parameter list."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.states = [
            AdamState.for_shape(p.shape, dtype=p.data.dtype, lr=lr,
                                beta1=beta1, beta2=beta2, eps=eps)
            for p in self.params
        ]

    @property
    def lr(self) -> float:
        return self.states[0].lr if self.states else 0.0

    def set_lr(self, lr: float):
        for s in self.states:
            s.lr = lr

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, skip: set[int] | None = None):
        """Update every parameter with a populated gradient.

        ``skip`` holds ids of parameters to leave untouched (their moments
        and step counters do not advance either, so freezing is exact).
        """
        for p, s in zip(self.params, self.states):
            if skip and id(p) in skip:
                continue
            if p.grad is None:
                continue
            p.data = adam_step(p.data, p.grad, s)
