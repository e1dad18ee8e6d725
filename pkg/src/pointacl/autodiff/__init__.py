from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import analytic_grads, finite_diff_check
from .nn import LayerNorm, Linear, Module, parameter, uniform_init
from .tensor import Tensor, as_tensor, backward, grad_enabled, no_grad, reachable_leaves, zero_grads

__all__ = [
    "ops", "Tensor", "as_tensor", "backward", "grad_enabled", "no_grad", "reachable_leaves",
    "zero_grads", "finite_diff_check", "analytic_grads", "Module", "Linear", "LayerNorm",
    "parameter", "uniform_init", "save_checkpoint", "load_checkpoint", "CheckpointError",
]
