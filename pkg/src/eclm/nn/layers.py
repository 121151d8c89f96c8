"""Dense layers, Glorot initialization, and the SGD step."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from ..errors import ConfigError, DimensionError
from .tensor import GradTape, Gradients, Tensor, linear, relu, reshape, softmax_rows

ACTIVATIONS = ("identity", "relu", "softmax")


@dataclass
class DenseLayer:
    """Fully connected layer: activation(w @ x + b), w is [out, in]."""

    w: Tensor
    b: Tensor
    activation: str = "identity"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation '{self.activation}'")
        if self.w.ndim != 2 or self.b.ndim != 1:
            raise DimensionError("DenseLayer expects 2-D weights and 1-D bias")
        if self.b.shape[0] != self.w.shape[0]:
            raise DimensionError(
                f"bias length {self.b.shape[0]} != out dim {self.w.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w.shape[0]

    @property
    def n_params(self) -> int:
        return self.w.data.size + self.b.data.size

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.w.copy(), self.b.copy(), self.activation)


def dense_layer(
    in_dim: int, out_dim: int, activation: str, rng: np.random.Generator
) -> DenseLayer:
    """Glorot-uniform initialized layer: w ~ U[-sqrt(6/(in+out)), +...], b = 0."""
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    w = Tensor(rng.uniform(-limit, limit, size=(out_dim, in_dim)))
    b = Tensor(np.zeros(out_dim))
    return DenseLayer(w, b, activation)


def dense_forward(x: Tensor, layer: DenseLayer, tape: GradTape | None = None) -> Tensor:
    """Apply the layer to x ([B, in] batch or single [in] vector)."""
    single = x.ndim == 1
    if single:
        x = reshape(x, (1, x.shape[0]), tape)
    out = linear(x, layer.w, layer.b, tape)
    if layer.activation == "relu":
        out = relu(out, tape)
    elif layer.activation == "softmax":
        out = softmax_rows(out, tape)
    if single:
        out = reshape(out, (out.shape[1],), tape)
    return out


def forward_chain(x: Tensor, layers: Iterable[DenseLayer], tape: GradTape | None = None) -> Tensor:
    for layer in layers:
        x = dense_forward(x, layer, tape)
    return x


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.001
    batch_size: int = 16

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def sgd_step(params: Iterable[Tensor], grads: Gradients, cfg: SgdConfig) -> None:
    """p <- p - lr * g in place; parameters the loss never reached are left alone."""
    lr = cfg.learning_rate
    for p in params:
        g = grads.get(p)
        if g is None:
            continue
        if np.shape(g) != p.shape:
            raise DimensionError(f"gradient shape {np.shape(g)} != param shape {p.shape}")
        p.data -= lr * g
