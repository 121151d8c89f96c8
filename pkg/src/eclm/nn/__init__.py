"""Minimal dense-network substrate: tensors, layers, losses, SGD, checkpoints."""

from .tensor import (
    GradTape,
    Gradients,
    Tensor,
    backward,
    cross_entropy,
    softmax_rows,
)
from .layers import DenseLayer, SgdConfig, dense_forward, dense_layer, forward_chain, sgd_step
from .serialize import decode_bundle, encode_bundle

__all__ = [
    "GradTape",
    "Gradients",
    "Tensor",
    "backward",
    "cross_entropy",
    "softmax_rows",
    "DenseLayer",
    "SgdConfig",
    "dense_forward",
    "dense_layer",
    "forward_chain",
    "sgd_step",
    "decode_bundle",
    "encode_bundle",
]
