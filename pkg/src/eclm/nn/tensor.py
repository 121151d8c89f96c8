"""Reverse-mode autodiff over float64 numpy arrays.

A Tensor is a thin wrapper around an ndarray. Operations compute eagerly
and, when handed a GradTape, record a backward closure. backward() walks
the tape once in reverse order and accumulates gradients keyed by tensor
identity, so a parameter consumed in several places receives the sum of
all its contributions.

Only the ops the modular model needs exist here; there is no broadcasting
beyond the explicit row-wise helpers.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import DimensionError, GraphError

KL_EPS = 1e-8


class Tensor:
    """Mutable float64 array; gradients are looked up by object identity."""

    __slots__ = ("data",)

    def __init__(self, data) -> None:
        self.data = np.asarray(data, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


class GradTape:
    """Append-only op log; replayed exactly once, in reverse, by backward()."""

    __slots__ = ("_records",)

    def __init__(self) -> None:
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def record(self, out: Tensor, ins: tuple[Tensor, ...], bwd: Callable) -> None:
        self._records.append((out, ins, bwd))

    def __len__(self) -> int:
        return len(self._records)


class Gradients:
    """Gradient store keyed by tensor identity."""

    def __init__(self) -> None:
        self._by_id: dict[int, np.ndarray] = {}

    def get(self, t: Tensor, default=None):
        return self._by_id.get(id(t), default)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self._by_id[id(t)]

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._by_id

    def _add(self, t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in self._by_id:
            self._by_id[key] = self._by_id[key] + g
        else:
            self._by_id[key] = np.array(g, dtype=np.float64)


def backward(tape: GradTape, loss: Tensor) -> Gradients:
    """Populate gradients for every tensor the loss reaches on the tape.

    The loss must be a scalar produced by an op recorded on this tape;
    otherwise the graph is detached and nothing could receive gradient.
    """
    if loss.data.size != 1:
        raise DimensionError(f"loss must be scalar, got shape {loss.data.shape}")
    if not any(out is loss for out, _, _ in tape._records):
        raise GraphError("loss was not produced by an operation on this tape")
    grads = Gradients()
    grads._add(loss, np.ones_like(loss.data))
    for out, ins, bwd in reversed(tape._records):
        g_out = grads.get(out)
        if g_out is None:
            continue
        for t, g in zip(ins, bwd(g_out)):
            if g is not None:
                grads._add(t, g)
    return grads


# ---------------------------------------------------------------------------
# ops


def linear(x: Tensor, w: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    """x @ w.T + b for x [B, in], w [out, in], b [out]."""
    if x.ndim != 2 or w.ndim != 2:
        raise DimensionError("linear expects 2-D input and weight")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: input dim {x.shape[1]} != weight dim {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    out = Tensor(x.data @ w.data.T + b.data)
    if tape is not None:
        xd, wd = x.data, w.data

        def bwd(g):
            return g @ wd, g.T @ xd, g.sum(axis=0)

        tape.record(out, (x, w, b), bwd)
    return out


def relu(x: Tensor, tape: GradTape | None = None) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    if tape is not None:
        mask = x.data > 0.0
        tape.record(out, (x,), lambda g: (g * mask,))
    return out


def softmax_rows(x: Tensor, tape: GradTape | None = None) -> Tensor:
    """Row-wise softmax of a [B, N] tensor."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)
    if tape is not None:
        tape.record(out, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))
    return out


def cross_entropy(logits: Tensor, labels, tape: GradTape | None = None) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits).

    Accepts a single [C] logit vector with an int label, or [B, C] logits
    with a length-B label array; batches reduce by mean.
    """
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = z.shape
    if y.shape != (n,):
        raise DimensionError(f"labels shape {y.shape} does not match batch {n}")
    if y.min() < 0 or y.max() >= c:
        raise IndexError(f"label out of range for {c} classes")
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    loss = float(np.mean(lse - zs[np.arange(n), y]))
    out = Tensor(loss)
    if tape is not None:
        p = np.exp(zs)
        p /= p.sum(axis=1, keepdims=True)

        def bwd(g):
            gi = p.copy()
            gi[np.arange(n), y] -= 1.0
            gi *= float(g) / n
            return (gi[0] if single else gi,)

        tape.record(out, (logits,), bwd)
    return out


def add(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    if tape is not None:
        tape.record(out, (a, b), lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)
    if tape is not None:
        tape.record(out, (a, b), lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record(out, (a, b), lambda g: (g * bd, g * ad))
    return out


def div(a: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"div: {a.shape} vs {b.shape}")
    out = Tensor(a.data / b.data)
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record(out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))
    return out


def square(x: Tensor, tape: GradTape | None = None) -> Tensor:
    out = Tensor(x.data * x.data)
    if tape is not None:
        xd = x.data
        tape.record(out, (x,), lambda g: (2.0 * xd * g,))
    return out


def scale(x: Tensor, c: float, tape: GradTape | None = None) -> Tensor:
    """Multiply by a python constant (no gradient to c)."""
    out = Tensor(x.data * c)
    if tape is not None:
        tape.record(out, (x,), lambda g: (g * c,))
    return out


def add_const(x: Tensor, c: np.ndarray, tape: GradTape | None = None) -> Tensor:
    """Add a constant array (e.g. selection noise); gradient passes through."""
    out = Tensor(x.data + c)
    if tape is not None:
        tape.record(out, (x,), lambda g: (g,))
    return out


def mul_const(x: Tensor, c: np.ndarray, tape: GradTape | None = None) -> Tensor:
    """Multiply by a constant array (e.g. a top-k mask)."""
    out = Tensor(x.data * c)
    if tape is not None:
        cc = np.asarray(c, dtype=np.float64)
        tape.record(out, (x,), lambda g: (g * cc,))
    return out


def col(x: Tensor, i: int, tape: GradTape | None = None) -> Tensor:
    """Extract column i of a [B, N] tensor as a [B] vector."""
    out = Tensor(x.data[:, i].copy())
    if tape is not None:
        shape = x.shape

        def bwd(g):
            gx = np.zeros(shape)
            gx[:, i] = g
            return (gx,)

        tape.record(out, (x,), bwd)
    return out


def scale_rows(v: Tensor, m: Tensor, tape: GradTape | None = None) -> Tensor:
    """Row-scale m [B, D] by per-row weights v [B]."""
    if v.ndim != 1 or m.ndim != 2 or v.shape[0] != m.shape[0]:
        raise DimensionError(f"scale_rows: {v.shape} vs {m.shape}")
    out = Tensor(v.data[:, None] * m.data)
    if tape is not None:
        vd, md = v.data, m.data
        tape.record(out, (v, m), lambda g: ((g * md).sum(axis=1), g * vd[:, None]))
    return out


def mean_rows(x: Tensor, tape: GradTape | None = None) -> Tensor:
    """Mean over axis 0: [B, N] -> [N]."""
    n = x.shape[0]
    out = Tensor(x.data.mean(axis=0))
    if tape is not None:
        tape.record(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))
    return out


def sum_all(x: Tensor, tape: GradTape | None = None) -> Tensor:
    out = Tensor(x.data.sum())
    if tape is not None:
        tape.record(out, (x,), lambda g: (np.full(x.shape, float(g)),))
    return out


def mean_all(x: Tensor, tape: GradTape | None = None) -> Tensor:
    n = x.data.size
    out = Tensor(x.data.mean())
    if tape is not None:
        tape.record(out, (x,), lambda g: (np.full(x.shape, float(g) / n),))
    return out


def sub_bcast(x: Tensor, s: Tensor, tape: GradTape | None = None) -> Tensor:
    """Subtract a scalar tensor from every element of x."""
    if s.data.size != 1:
        raise DimensionError("sub_bcast expects a scalar second argument")
    out = Tensor(x.data - s.data)
    if tape is not None:
        tape.record(out, (x, s), lambda g: (g, -np.sum(g)))
    return out


def reshape(x: Tensor, shape: tuple[int, ...], tape: GradTape | None = None) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    if tape is not None:
        orig = x.shape
        tape.record(out, (x,), lambda g: (g.reshape(orig),))
    return out


def kl_from_target(p: np.ndarray, q: Tensor, tape: GradTape | None = None) -> Tensor:
    """Mean over rows of KL(p || q) with epsilon smoothing inside the log.

    p is a constant target distribution array shaped like q ([N] or [B, N]);
    gradient flows to q only.
    """
    pd = np.asarray(p, dtype=np.float64)
    if pd.shape != q.shape:
        raise DimensionError(f"kl_from_target: {pd.shape} vs {q.shape}")
    p2 = pd[None, :] if pd.ndim == 1 else pd
    q2 = q.data[None, :] if q.ndim == 1 else q.data
    rows = p2.shape[0]
    val = float(np.sum(p2 * (np.log(p2 + KL_EPS) - np.log(q2 + KL_EPS))) / rows)
    out = Tensor(val)
    if tape is not None:
        qshape = q.shape

        def bwd(g):
            gq = -(p2 / (q2 + KL_EPS)) * (float(g) / rows)
            return (gq.reshape(qshape),)

        tape.record(out, (q,), bwd)
    return out
