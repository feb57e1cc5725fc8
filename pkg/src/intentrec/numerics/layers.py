"""MLP and GRU building blocks on top of :mod:`intentrec.numerics.tensor`."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .params import ParameterSet
from .tensor import ShapeError, Tensor

GRU_GATES = ("u", "r", "c")


def uniform_init(rng: np.random.Generator, shape, epsilon: float) -> np.ndarray:
    return rng.uniform(-epsilon, epsilon, size=shape)


def glorot_init(rng: np.random.Generator, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[-1]))
    return rng.uniform(-limit, limit, size=shape)


def init_mlp(
    name: str,
    layer_sizes: Sequence[int],
    rng: np.random.Generator,
    epsilon: float | None = None,
) -> ParameterSet:
    """Weights ``W{i}`` of shape (in, out) and zero biases ``b{i}``.

    With ``epsilon`` the weights are U(-epsilon, epsilon); otherwise
    Glorot-uniform.
    """
    ps = ParameterSet(name)
    for i, (n_in, n_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        shape = (n_in, n_out)
        w = uniform_init(rng, shape, epsilon) if epsilon is not None else glorot_init(rng, shape)
        ps.add(f"W{i}", w)
        ps.add(f"b{i}", np.zeros(n_out))
    return ps


def mlp_forward(
    params: ParameterSet,
    x,
    layer_sizes: Sequence[int],
    activation: str = "relu",
    final_activation: str = "identity",
) -> Tensor:
    """Affine layers with ``activation`` between them.

    The last layer uses ``final_activation`` (identity unless asked).
    """
    acts = {"relu": T.relu, "identity": lambda t: t}
    if activation not in acts or final_activation not in acts:
        raise ValueError(f"unknown activation {activation!r}/{final_activation!r}")
    h = T.as_tensor(x)
    n_layers = len(layer_sizes) - 1
    for i in range(n_layers):
        w, b = params[f"W{i}"], params[f"b{i}"]
        if h.shape[-1] != w.shape[0] or w.shape[0] != layer_sizes[i]:
            raise ShapeError(
                f"{params.name} layer {i}: input dim {h.shape[-1]} does not match "
                f"weight shape {w.shape} (declared {layer_sizes[i]})"
            )
        h = h @ w + b
        h = acts[final_activation if i == n_layers - 1 else activation](h)
    return h


def init_gru(
    name: str, input_dim: int, hidden_dim: int, rng: np.random.Generator
) -> ParameterSet:
    ps = ParameterSet(name)
    for gate in GRU_GATES:
        ps.add(f"W_{gate}", glorot_init(rng, (input_dim, hidden_dim)))
        ps.add(f"U_{gate}", glorot_init(rng, (hidden_dim, hidden_dim)))
        ps.add(f"b_{gate}", np.zeros(hidden_dim))
    return ps


def gru_step(params: ParameterSet, h_prev, x_t) -> Tensor:
    """One GRU update.

    u = sigmoid(x W_u + h U_u + b_u)
    r = sigmoid(x W_r + h U_r + b_r)
    c = tanh(x W_c + (r * h) U_c + b_c)
    h' = (1 - u) * h + u * c
    """
    h_prev, x_t = T.as_tensor(h_prev), T.as_tensor(x_t)
    if x_t.shape[-1] != params["W_u"].shape[0]:
        raise ShapeError(f"GRU input dim {x_t.shape[-1]} != {params['W_u'].shape[0]}")
    if h_prev.shape[-1] != params["U_u"].shape[0]:
        raise ShapeError(f"GRU hidden dim {h_prev.shape[-1]} != {params['U_u'].shape[0]}")
    u = T.sigmoid(x_t @ params["W_u"] + h_prev @ params["U_u"] + params["b_u"])
    r = T.sigmoid(x_t @ params["W_r"] + h_prev @ params["U_r"] + params["b_r"])
    c = T.tanh(x_t @ params["W_c"] + (r * h_prev) @ params["U_c"] + params["b_c"])
    return (1.0 - u) * h_prev + u * c
