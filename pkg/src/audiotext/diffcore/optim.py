"""Adam with bias-corrected moments."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Tuple, Union

import numpy as np

from ..errors import StateError
from .layers import Parameter

NamedParams = Union[Dict[str, Parameter], Iterable[Tuple[str, Parameter]]]


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def _items(params: NamedParams):
    return list(params.items()) if isinstance(params, dict) else list(params)


def adam_step(params: NamedParams, state: OptimizerState, lr: float | None = None) -> OptimizerState:
    """Apply one Adam update in place.  Gradients are left untouched; clear them with :func:`zero_grad`."""
    lr = state.lr if lr is None else lr
    if lr < 0:
        raise StateError(f"learning rate must be >= 0, got {lr}")
    items = _items(params)
    for name, p in items:
        if p.grad is None:
            raise StateError(f"parameter '{name}' has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in items:
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.data.shape:
            raise StateError(f"moment buffer for '{name}' has shape {m.shape}, parameter {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def zero_grad(params: NamedParams) -> None:
    for _, p in _items(params):
        p.grad = None


class Adam:
    """Convenience wrapper binding a named parameter list to an :class:`OptimizerState`."""

    def __init__(self, params: NamedParams, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = _items(params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, lr: float | None = None) -> None:
        adam_step(self.params, self.state, lr)

    def zero_grad(self) -> None:
        zero_grad(self.params)
