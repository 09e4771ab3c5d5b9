"""Minimal dense-tensor engine with reverse-mode differentiation."""

from mapfusion.autodiff.tensor import Tensor
from mapfusion.autodiff.ops import (
    add,
    batchnorm2d,
    bce_with_logits,
    concat_channels,
    conv2d,
    l1_masked,
    mul_scalar,
    penalty_reduced_focal,
    relu,
    relu_kink_trace,
    reshape,
    sigmoid,
)
from mapfusion.autodiff.optim import OptimState, adamw_step, init_optim_state, one_cycle_lr
from mapfusion.autodiff.params import ModelParams
from mapfusion.autodiff.checkpoint import (
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from mapfusion.autodiff.gradcheck import grad_check

__all__ = [
    "Tensor",
    "add",
    "batchnorm2d",
    "bce_with_logits",
    "concat_channels",
    "conv2d",
    "l1_masked",
    "mul_scalar",
    "penalty_reduced_focal",
    "relu",
    "relu_kink_trace",
    "reshape",
    "sigmoid",
    "OptimState",
    "adamw_step",
    "init_optim_state",
    "one_cycle_lr",
    "ModelParams",
    "CheckpointError",
    "load_checkpoint",
    "save_checkpoint",
    "grad_check",
]
