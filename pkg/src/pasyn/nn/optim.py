"""Adam with bias correction, operating on named parameter dictionaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import NNError, named_gradients, named_parameters


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise NNError("learning rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise NNError("Adam betas must lie in [0, 1)")


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """Update ``params`` in place and return them.

    Every gradient is checked before any parameter moves, so a non-finite
    gradient leaves the model untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise NNError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise NNError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NNError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


class Adam:
    """Convenience wrapper binding an :class:`AdamState` to a network."""

    def __init__(self, net, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.net = net
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        adam_step(named_parameters(self.net), named_gradients(self.net), self.state)
