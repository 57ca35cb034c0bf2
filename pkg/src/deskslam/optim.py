"""Adam optimizer with bias correction, plus the two decay schedules the
training loops use (step decay and per-epoch exponential decay)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from deskslam.autodiff import Tensor


@dataclass
class AdamState:
    """Per-parameter first/second moments and the shared step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: List[Tensor]) -> None:
    """One Adam update from the gradients currently on `params`.

    Parameters with no gradient are left untouched (their moments do not
    advance either, matching a zero-gradient step for absent terms).
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for k, p in enumerate(params):
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if k not in state.m:
            state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        m = state.m[k]
        v = state.v[k]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = p.data - (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype)


def step_decay(base_lr: float, epoch: int, factor: float = 0.1, every: int = 60) -> float:
    """lr * factor^(epoch // every): the 'drop by x0.1 per 60 epochs' shape."""
    return base_lr * factor ** (epoch // every)


def exp_decay(base_lr: float, epoch: int, factor: float = 0.98) -> float:
    """lr * factor^epoch: the per-epoch multiplicative decay shape."""
    return base_lr * factor**epoch


def zero_grads(params: List[Tensor]) -> None:
    for p in params:
        p.grad = None
