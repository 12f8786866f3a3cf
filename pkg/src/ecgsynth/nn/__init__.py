"""Differentiable-compute substrate: tape tensors, layers, optimizer,
losses, gradient checking and checkpoint I/O."""

from .tensor import (
    Param,
    Tensor,
    concatenate,
    conv1d,
    dropout,
    embedding,
    irfft_stack,
    layer_norm,
    overlap_add,
    rfft_stack,
    softmax,
    stack,
    upsample_nearest,
)
from .layers import (
    Conv1d,
    Dense,
    Dropout,
    Embedding,
    LayerNorm,
    Module,
    MultiheadSelfAttention,
    ReLU,
    Sequential,
    freeze_all_except_head,
    residual_add,
)
from .losses import cross_entropy, mse, softmax_probs
from .optim import Adam, EarlyStop, adam_step
from .gradcheck import GradCheckReport, grad_check
from .checkpoint import load_arrays, load_model, save_arrays, save_model

__all__ = [
    "Adam", "Conv1d", "Dense", "Dropout", "EarlyStop", "Embedding",
    "GradCheckReport", "LayerNorm", "Module", "MultiheadSelfAttention",
    "Param", "ReLU", "Sequential", "Tensor", "adam_step", "concatenate",
    "conv1d", "cross_entropy", "dropout", "embedding", "freeze_all_except_head",
    "grad_check", "irfft_stack", "layer_norm", "load_arrays", "load_model",
    "mse", "overlap_add", "residual_add", "rfft_stack", "save_arrays",
    "save_model", "softmax", "softmax_probs", "stack", "upsample_nearest",
]
