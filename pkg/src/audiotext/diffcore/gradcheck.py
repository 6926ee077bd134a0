"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Sequence

import numpy as np

from ..errors import NumericError
from .tensor import Tensor, no_grad


@dataclass
class InputCheck:
    index: int
    shape: tuple
    max_error: float
    passed: bool


@dataclass
class GradCheckReport:
    max_relative_error: float
    inputs: List[InputCheck] = field(default_factory=list)
    excluded: bool = False
    reason: str = ""

    @property
    def passed(self) -> bool:
        return self.excluded or all(c.passed for c in self.inputs)


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise NumericError(f"gradient check needs a scalar function, got shape {out.shape}")
    value = float(out.data.reshape(-1)[0])
    if not np.isfinite(value):
        raise NumericError(f"function value is not finite: {value}")
    return value


def gradient_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
                   tol: float = 1e-4, abs_floor: float = 1e-6) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f(*inputs)`` against central differences.

    Elementwise error is ``|a - n| / max(|a|, |n|)``, falling back to the
    absolute difference when both magnitudes are below ``abs_floor``.
    Evaluations landing on a non-differentiable point (e.g. a max-pool tie)
    are reported as excluded rather than compared.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    out = f(*inputs)
    _scalar(out)
    if out.nondiff:
        return GradCheckReport(0.0, [], excluded=True,
                               reason="forward pass hits a non-differentiable point (subgradient)")
    out.backward()
    analytic = [np.zeros(x.shape) if x.grad is None else x.grad.copy() for x in inputs]

    checks, worst = [], 0.0
    with no_grad():
        for i, x in enumerate(inputs):
            flat = x.data.reshape(-1)
            numeric = np.empty(flat.size)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                up = _scalar(f(*inputs))
                flat[k] = orig - eps
                down = _scalar(f(*inputs))
                flat[k] = orig
                numeric[k] = (up - down) / (2.0 * eps)
            a = analytic[i].reshape(-1)
            scale = np.maximum(np.abs(a), np.abs(numeric))
            diff = np.abs(a - numeric)
            err = np.where(scale > abs_floor, diff / np.where(scale > abs_floor, scale, 1.0), diff)
            e = float(err.max()) if err.size else 0.0
            worst = max(worst, e)
            checks.append(InputCheck(i, x.shape, e, e <= tol))
    return GradCheckReport(worst, checks)
