from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterator

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor


class ParameterSet:
    """Ordered, named collection of trainable leaf tensors.

    Gradients live on each leaf's ``.grad``; :attr:`grads` exposes them as
    arrays of the parameter's shape, with zeros for entries the last
    backward pass did not reach.
    """

    def __init__(self, name: str = ""):
        self.name = name
        self._entries: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, key: str, value: np.ndarray) -> Tensor:
        if key in self._entries:
            raise KeyError(f"duplicate parameter name {key!r} in {self.name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=f"{self.name}.{key}")
        self._entries[key] = t
        return t

    def __getitem__(self, key: str) -> Tensor:
        return self._entries[key]

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def qualified(self) -> Iterator[tuple[str, Tensor]]:
        """(``set.key``, tensor) pairs, the names used in checkpoints and reports."""
        for key, t in self._entries.items():
            yield f"{self.name}.{key}", t

    @property
    def grads(self) -> dict[str, np.ndarray]:
        return {
            k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in self._entries.items()
        }

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def copy(self) -> "ParameterSet":
        other = ParameterSet(self.name)
        for k, t in self._entries.items():
            other.add(k, t.data.copy())
        return other

    def assign(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            t = self._entries[k]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != t.shape:
                raise ShapeError(f"{self.name}.{k}: expected shape {t.shape}, got {v.shape}")
            t.data = v.copy()

    def check_finite(self) -> None:
        for name, t in self.qualified():
            if not np.all(np.isfinite(t.data)):
                raise NonFiniteError(f"parameter {name} contains NaN/Inf")


def zero_grads(*param_sets: ParameterSet) -> None:
    for ps in param_sets:
        ps.zero_grad()


def evaluate_with_gradients(
    loss_fn: Callable[[], Tensor], *param_sets: ParameterSet
) -> float:
    """Run ``loss_fn`` once, backpropagate and return the loss value.

    Gradients are reset first, so parameters not on the loss path end up
    with exactly zero gradient.
    """
    zero_grads(*param_sets)
    loss = loss_fn()
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    loss.backward()
    return loss.item()
