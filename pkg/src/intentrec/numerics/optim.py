from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParameterSet
from .tensor import NonFiniteError, ShapeError


@dataclass
class AdamState:
    """Moment estimates for one :class:`ParameterSet`."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParameterSet, **hyper) -> "AdamState":
        state = cls(**hyper)
        for k, t in params.items():
            state.m[k] = np.zeros_like(t.data)
            state.v[k] = np.zeros_like(t.data)
        return state


def adam_step(params: ParameterSet, state: AdamState) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    grads = params.grads
    for k, g in grads.items():
        if k not in state.m or state.m[k].shape != g.shape:
            raise ShapeError(f"Adam state for {params.name}.{k} does not match parameter shape")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {params.name}.{k}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for k, g in grads.items():
        m = state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        p = params[k]
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.check_finite()
