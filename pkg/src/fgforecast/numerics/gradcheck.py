"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import GradientTape, Parameter, Tensor


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    checks: list[ParamCheck]
    tol: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def worst(self) -> float:
        return max((c.max_rel_error for c in self.checks), default=0.0)

    def __str__(self) -> str:
        lines = [f"{'ok' if c.passed else 'FAIL':4s} {c.name}: {c.max_rel_error:.3e}" for c in self.checks]
        return "\n".join(lines)


def analytic_gradients(closure: Callable[[], Tensor], params: list[Parameter]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    with GradientTape() as tape:
        loss = closure()
    tape.backward(loss)
    return [p.grad.copy() for p in params]


def numeric_gradient(closure: Callable[[], Tensor], p: Parameter, h: float) -> np.ndarray:
    base = p.data.copy()
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for k in range(base.size):
        shifted = base.copy().reshape(-1)
        shifted[k] += h
        p.assign(shifted.reshape(base.shape))
        f_plus = closure().item()
        shifted[k] -= 2 * h
        p.assign(shifted.reshape(base.shape))
        f_minus = closure().item()
        flat[k] = (f_plus - f_minus) / (2 * h)
    p.assign(base)
    return grad


def gradient_check(closure: Callable[[], Tensor], params, h: float = 1e-5,
                   tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients with central differences, elementwise.

    ``params`` is a list of Parameters or a name -> Parameter mapping.  The
    relative error of each entry uses ``max(|a|, |n|, 1e-8)`` as denominator.
    """
    named = dict(params) if isinstance(params, dict) else {p.name or f"p{i}": p for i, p in enumerate(params)}
    plist = list(named.values())
    analytic = analytic_gradients(closure, plist)
    checks = []
    for (name, p), a in zip(named.items(), analytic):
        n = numeric_gradient(closure, p, h)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        err = float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
        checks.append(ParamCheck(name, err, err < tol))
    return GradCheckReport(checks, tol)
