from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .params import ParameterSet, evaluate_with_gradients
from .tensor import Tensor


class NondeterministicLossError(RuntimeError):
    """The loss changed between two evaluations at identical parameters."""


# central stencils as (offset in steps, weight) pairs applied to f(+k) - f(-k);
# differencing symmetric pairs first keeps exact zeros exact
STENCILS = {
    2: ((1, 0.5),),
    4: ((1, 8 / 12), (2, -1 / 12)),
}


def relative_error(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check_report(
    loss_fn: Callable[[], Tensor],
    param_sets: Sequence[ParameterSet],
    step: float = 1e-5,
    corrupt: float = 0.0,
    order: int = 2,
) -> dict[str, float]:
    """Worst relative error per parameter tensor, keyed ``set.name``.

    Analytic gradients come from one backward pass; numerical ones from
    central differences on every element, either the 3-point (``order=2``)
    or the 5-point (``order=4``) stencil. ``corrupt`` scales the analytic
    gradient by ``1 + corrupt`` (fault injection for tests).
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    if order not in STENCILS:
        raise ValueError(f"order must be one of {sorted(STENCILS)}")
    stencil = STENCILS[order]
    base = evaluate_with_gradients(loss_fn, *param_sets)
    if loss_fn().item() != base:
        raise NondeterministicLossError("loss_fn is not deterministic; freeze its noise")

    report: dict[str, float] = {}
    for ps in param_sets:
        analytic = {k: g.copy() * (1.0 + corrupt) for k, g in ps.grads.items()}
        for name, t in ps.qualified():
            key = name.split(".", 1)[1]
            t.data = np.ascontiguousarray(t.data)
            flat = t.data.reshape(-1)
            numeric = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                acc = 0.0
                for k, w in stencil:
                    flat[i] = orig + k * step
                    up = loss_fn().item()
                    flat[i] = orig - k * step
                    acc += w * (up - loss_fn().item())
                flat[i] = orig
                numeric[i] = acc / step
            err = relative_error(analytic[key].reshape(-1), numeric)
            report[name] = float(err.max()) if err.size else 0.0
    return report


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: ParameterSet | Sequence[ParameterSet],
    step: float = 1e-5,
    order: int = 2,
) -> float:
    """Worst element-wise relative error between analytic and central-difference gradients."""
    sets = [params] if isinstance(params, ParameterSet) else list(params)
    report = grad_check_report(loss_fn, sets, step=step, order=order)
    return max(report.values(), default=0.0)


def min_relu_input(fn: Callable[[], object]) -> float:
    """Smallest |input| seen by any ReLU while running ``fn``.

    Finite differences are meaningless across a kink, so a check point is
    only trustworthy when this exceeds the largest stencil offset times the
    typical sensitivity of the pre-activations. Returns ``inf`` if no ReLU ran.
    """
    from . import tensor as T

    seen = [np.inf]
    original = T.relu

    def recording_relu(x):
        x = T.as_tensor(x)
        if x.data.size:
            seen.append(float(np.abs(x.data).min()))
        return original(x)

    T.relu = recording_relu
    try:
        fn()
    finally:
        T.relu = original
    return min(seen)
