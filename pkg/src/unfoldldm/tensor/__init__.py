"""Minimal reverse-mode autodiff over numpy arrays."""

from unfoldldm.tensor.tensor import Tensor, as_tensor, backward, grad_enabled, no_grad
from unfoldldm.tensor.ops import OPS, apply
from unfoldldm.tensor.params import (
    AdamState,
    ParamRegistry,
    cosine_lr,
    load_checkpoint,
    optimizer_step,
    read_checkpoint,
    save_checkpoint,
)

__all__ = [
    "Tensor", "as_tensor", "backward", "grad_enabled", "no_grad", "OPS", "apply",
    "AdamState", "ParamRegistry", "cosine_lr", "load_checkpoint", "optimizer_step",
    "read_checkpoint", "save_checkpoint",
]
