"""Direct-gradient baseline: Adam on the multiple-shooting position loss."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from bsense.estimator import Transition, stack_predictions
from bsense.simulator import Simulator


@dataclass(frozen=True, eq=False)
class AdamState:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None)
    v: np.ndarray | None = field(default=None)


def shooting_loss(sim: Simulator, b: np.ndarray, history: Sequence[Transition], M: Sequence[int],
                  gradient: str = "implicit", eps: float = 1e-6):
    """``(1/k) |X_ref - X_pred|^2`` over the sampled transitions, and its gradient in ``b``."""
    b = np.asarray(b, dtype=np.float64)
    k = len(M)
    if gradient == "fd":
        def value(bb):
            r, _ = stack_predictions(sim, history, M, bb, jacobian="implicit")
            return float(r @ r) / k
        val = value(b)
        g = np.zeros_like(b)
        for i in range(b.size):
            hi, lo = b.copy(), b.copy()
            hi[i] += eps
            lo[i] = max(lo[i] - eps, 0.0)
            g[i] = (value(hi) - value(lo)) / (hi[i] - lo[i])
        return val, g
    r, J = stack_predictions(sim, history, M, b, jacobian=gradient)
    return float(r @ r) / k, -2.0 / k * (J.T @ r)


def adam_baseline_update(b: np.ndarray, history: Sequence[Transition], M: Sequence[int], state: AdamState,
                         sim: Simulator, gradient: str = "implicit"):
    """One Adam step on the stiffness vector, clamped at zero. Returns ``(b, state)``."""
    _, g = shooting_loss(sim, b, history, M, gradient)
    m = np.zeros_like(g) if state.m is None else state.m
    v = np.zeros_like(g) if state.v is None else state.v
    t = state.step + 1
    m = state.beta1 * m + (1 - state.beta1) * g
    v = state.beta2 * v + (1 - state.beta2) * g * g
    mhat = m / (1 - state.beta1 ** t)
    vhat = v / (1 - state.beta2 ** t)
    b_new = np.maximum(np.asarray(b) - state.lr * mhat / (np.sqrt(vhat) + state.eps), 0.0)
    return b_new, replace(state, step=t, m=m, v=v)
