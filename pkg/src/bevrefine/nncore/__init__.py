"""Minimal reverse-mode autodiff engine: tensors, layers, optimizer, checkpoints."""
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    abs_,
    add,
    backward,
    bilinear_upsample_2x,
    concat,
    conv2d,
    cos,
    div,
    dropout,
    finite_checks_enabled,
    gather,
    group_norm,
    layer_norm,
    linear,
    matmul,
    max_pool,
    maximum,
    mean_pool,
    minimum,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    scatter_add,
    set_finite_checks,
    sin,
    slice_,
    softmax,
    stack,
    sub,
    sum_pool,
    transpose,
)
from .layers import (
    Conv2d,
    Dropout,
    GroupNorm,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    norm_groups,
    parameter,
)
from .optim import AdamW, LrSchedule, clip_grad_norm, clip_gradients_, lr_at
from .checkpoint import CheckpointError, load_checkpoint, load_into, save_checkpoint

__all__ = [name for name in dir() if not name.startswith("_")]
