"""Unified module selector: one embedding trunk plus per-layer gating heads.

A single forward pass over the raw input yields a softmax distribution over
the modules of every module layer at once. Training uses noisy top-k (zero
mean Gaussian on the pre-softmax logits); evaluation is noise free. The two
auxiliary losses -- load balancing and KL guidance -- live here too.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .nn.layers import DenseLayer, dense_forward, dense_layer
from .nn.tensor import (
    GradTape,
    Tensor,
    add,
    add_const,
    div,
    kl_from_target,
    linear,
    mean_all,
    mean_rows,
    softmax_rows,
    square,
    sub_bcast,
)

MODES = ("train", "eval")


def topk_rows(values: np.ndarray, k: int) -> np.ndarray:
    """Per-row indices of the k largest entries, ties broken by lower index.

    Returned indices are sorted ascending within each row.
    """
    order = np.argsort(-values, axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1)


@dataclass
class RoutingDecision:
    """Per-layer gate distributions and activated sets for a batch.

    gates[l] is [B, N_l] (rows sum to 1), active[l] is [B, k_l] sorted int
    indices. gate_tensors is populated in train mode so losses can backprop
    into the selector.
    """

    gates: list[np.ndarray]
    active: list[np.ndarray]
    gate_tensors: list[Tensor] | None = None

    @property
    def batch_size(self) -> int:
        return self.gates[0].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.gates)


@dataclass
class RoutingBatchStats:
    """Per-module mean gate mass (soft load) and hard activation counts."""

    loads: list[np.ndarray]
    counts: list[np.ndarray]
    batch_size: int
    k: int
    load_tensors: list[Tensor] | None = None

    def max_load(self) -> float:
        return max(float(l.max()) for l in self.loads)


@dataclass
class UnifiedSelector:
    embed: list[DenseLayer]
    heads: list[DenseLayer]
    k: int
    noise_scale: float = 0.0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")
        for head in self.heads:
            if self.k > head.out_dim:
                raise ConfigError(
                    f"k={self.k} exceeds module count {head.out_dim} of a head"
                )

    @property
    def n_layers(self) -> int:
        return len(self.heads)

    def module_counts(self) -> list[int]:
        return [h.out_dim for h in self.heads]

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for layer in self.embed:
            params.extend(layer.parameters())
        for head in self.heads:
            params.extend(head.parameters())
        return params

    def copy(self) -> "UnifiedSelector":
        return UnifiedSelector(
            [l.copy() for l in self.embed],
            [h.copy() for h in self.heads],
            self.k,
            self.noise_scale,
        )


def make_selector(
    input_dim: int,
    embed_dims: tuple[int, ...],
    module_counts: list[int],
    k: int,
    rng: np.random.Generator,
    noise_scale: float = 0.0,
) -> UnifiedSelector:
    embed: list[DenseLayer] = []
    d = input_dim
    for h in embed_dims:
        embed.append(dense_layer(d, h, "relu", rng))
        d = h
    heads = [dense_layer(d, n, "identity", rng) for n in module_counts]
    return UnifiedSelector(embed, heads, k, noise_scale)


def select(
    selector: UnifiedSelector,
    x: Tensor,
    mode: str = "eval",
    tape: GradTape | None = None,
    rng: np.random.Generator | None = None,
    noise_scale: float | None = None,
) -> RoutingDecision:
    """Route a batch: per-layer softmax gates and top-k activated sets.

    In train mode with positive noise scale, Gaussian noise perturbs the
    pre-softmax logits (requires rng); reported gates are the softmax of the
    noisy logits. With zero noise, train mode is bit-identical to eval mode.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown selection mode '{mode}'")
    if x.ndim == 1:
        x = Tensor(x.data[None, :])
    scale = selector.noise_scale if noise_scale is None else noise_scale
    h = x
    for layer in selector.embed:
        h = dense_forward(h, layer, tape)
    gates_np: list[np.ndarray] = []
    active: list[np.ndarray] = []
    gate_tensors: list[Tensor] = []
    for head in selector.heads:
        if selector.k > head.out_dim:
            raise ConfigError(f"k={selector.k} exceeds module count {head.out_dim}")
        logits = linear(h, head.w, head.b, tape)
        if mode == "train" and scale > 0.0:
            if rng is None:
                raise ConfigError("train-mode selection with noise requires an rng")
            logits = add_const(logits, rng.normal(0.0, scale, size=logits.shape), tape)
        g = softmax_rows(logits, tape)
        gates_np.append(g.data)
        gate_tensors.append(g)
        active.append(topk_rows(g.data, selector.k))
    return RoutingDecision(
        gates=gates_np,
        active=active,
        gate_tensors=gate_tensors if tape is not None else None,
    )


def routing_stats(decision: RoutingDecision, tape: GradTape | None = None) -> RoutingBatchStats:
    """Aggregate a batch decision into per-module loads and activation counts."""
    if decision.batch_size == 0:
        raise DataError("routing_stats needs a nonempty batch")
    loads: list[np.ndarray] = []
    counts: list[np.ndarray] = []
    load_tensors: list[Tensor] | None = [] if decision.gate_tensors else None
    for l in range(decision.n_layers):
        n = decision.gates[l].shape[1]
        if load_tensors is not None:
            lt = mean_rows(decision.gate_tensors[l], tape)
            load_tensors.append(lt)
            loads.append(lt.data)
        else:
            loads.append(decision.gates[l].mean(axis=0))
        counts.append(np.bincount(decision.active[l].ravel(), minlength=n))
    k = decision.active[0].shape[1]
    return RoutingBatchStats(
        loads=loads,
        counts=counts,
        batch_size=decision.batch_size,
        k=k,
        load_tensors=load_tensors,
    )


def load_balance_loss(stats: RoutingBatchStats, tape: GradTape | None = None) -> Tensor:
    """Sum over layers of the squared coefficient of variation of module loads.

    Zero iff every module of every layer carries equal soft load; one layer
    collapsed onto a single module contributes N - 1.
    """
    total: Tensor | None = None
    for l, loads_np in enumerate(stats.loads):
        loads = (
            stats.load_tensors[l] if stats.load_tensors is not None else Tensor(loads_np)
        )
        mean = mean_all(loads, tape)
        var = mean_all(square(sub_bcast(loads, mean, tape), tape), tape)
        cv2 = div(var, square(mean, tape), tape)
        total = cv2 if total is None else add(total, cv2, tape)
    assert total is not None
    return total


def kl_guidance_loss(
    decision: RoutingDecision,
    targets: list[np.ndarray],
    tape: GradTape | None = None,
) -> Tensor:
    """Sum over layers of KL(target || gates), averaged over the batch.

    targets[l] must be valid distributions shaped like gates[l]; epsilon
    smoothing inside the log makes zero predicted mass safe.
    """
    if len(targets) != decision.n_layers:
        raise DataError("target list length does not match layer count")
    total: Tensor | None = None
    for l, target in enumerate(targets):
        t = np.asarray(target, dtype=np.float64)
        if t.ndim == 1:
            t = np.broadcast_to(t, decision.gates[l].shape)
        if t.shape != decision.gates[l].shape:
            raise DataError(f"target shape {t.shape} != gates {decision.gates[l].shape}")
        if np.any(t < 0) or not np.allclose(t.sum(axis=1), 1.0, atol=1e-6):
            raise DataError("guidance targets must be probability distributions")
        q = (
            decision.gate_tensors[l]
            if decision.gate_tensors is not None
            else Tensor(decision.gates[l])
        )
        term = kl_from_target(t, q, tape)
        total = term if total is None else add(total, term, tape)
    assert total is not None
    return total
