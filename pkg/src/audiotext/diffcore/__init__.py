"""Minimal float64 tensor library with reverse-mode autodiff."""
from . import functional, ops
from .gradcheck import GradCheckReport, gradient_check
from .layers import (GRU, BatchNorm, Conv2d, DecoderBlock, Embedding, EncoderBlock, FeedForward,
                     GRUCell, LayerNorm, Linear, Module, MultiHeadAttention, Parameter, causal_mask)
from .optim import Adam, OptimizerState, adam_step, zero_grad
from .tensor import Tensor, as_tensor, debug_mode, is_grad_enabled, no_grad, set_debug

__all__ = [
    "Adam", "BatchNorm", "Conv2d", "DecoderBlock", "Embedding", "EncoderBlock", "FeedForward",
    "GRU", "GRUCell", "GradCheckReport", "LayerNorm", "Linear", "Module", "MultiHeadAttention",
    "OptimizerState", "Parameter", "Tensor", "adam_step", "as_tensor", "causal_mask", "debug_mode",
    "functional", "gradient_check", "is_grad_enabled", "no_grad", "ops", "set_debug", "zero_grad",
]
