"""Minimal dense numerics: tensors, reverse-mode autodiff, Adam, RNG streams."""

from .checkpoint import CheckpointError, load_checkpoint, load_metadata, save_checkpoint
from .gradcheck import GradCheckResult, check_gradients
from .ops import (
    add,
    concat,
    conv2d,
    conv_transpose2x,
    cross_entropy,
    dense,
    mean,
    mse_loss,
    mul,
    relu,
    reshape,
    resize_nearest,
    sigmoid,
    silu,
    softmax,
    sub,
    total,
    upsample_nearest,
)
from .optim import AdamState, adam_step
from .rng import Rng, gaussian, stream_key
from .tensor import (
    Tensor,
    accumulation,
    accumulation_dtype,
    as_tensor,
    backward,
    no_grad,
    parameter,
    topological_order,
)
