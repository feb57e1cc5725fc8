"""Small reverse-mode autodiff stack: tensors, layers, Adam, gradient checks."""

from .gradcheck import NondeterministicLossError, grad_check, grad_check_report, relative_error
from .layers import gru_step, init_gru, init_mlp, mlp_forward
from .optim import AdamState, adam_step
from .params import ParameterSet, evaluate_with_gradients, zero_grads
from .tensor import NonFiniteError, ShapeError, Tensor, stop_gradient

__all__ = [
    "AdamState",
    "NonFiniteError",
    "NondeterministicLossError",
    "ParameterSet",
    "ShapeError",
    "Tensor",
    "adam_step",
    "evaluate_with_gradients",
    "grad_check",
    "grad_check_report",
    "gru_step",
    "init_gru",
    "init_mlp",
    "mlp_forward",
    "relative_error",
    "stop_gradient",
    "zero_grads",
]
