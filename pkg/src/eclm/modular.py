"""Modularized model: ordinary front blocks, gated module layers, classifier head.

Each module layer replaces one dense block (in -> hidden -> out) with N
substitutable modules sharing the block's input/output dims: shrunk modules
keep the two-dense structure at a fraction of the hidden width, and an
optional residual module is a zero-parameter gated bypass. A routing
decision weights the activated modules' outputs by their raw gate mass.

Materialized sub-models keep only the retained modules of a spec. At
evaluation their activated gate mass is rescaled to the mass the full
selector's top-k would have carried, so outputs stay on scale when few
modules survive while remaining bit-identical to the cloud model whenever
the cloud's activated set is contained in the spec.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    CheckpointError,
    ConfigError,
    DimensionError,
    RoutingError,
    SpecError,
)
from .nn.layers import DenseLayer, dense_forward, dense_layer, forward_chain
from .nn.serialize import decode_bundle, encode_bundle
from .nn.tensor import GradTape, Tensor, add, col, mul_const, scale_rows
from .rng import stream
from .selector import RoutingDecision, UnifiedSelector, make_selector, select, topk_rows

BYTES_PER_PARAM = 8
TRAIN_COMPUTE_FACTOR = 3  # forward + backward MACs per training sample
MEM_FACTOR = 3  # params + grads + optimizer scratch


@dataclass(frozen=True)
class ResourceCost:
    comm_bytes: int
    compute_macs: int
    mem_bytes: int

    def __add__(self, other: "ResourceCost") -> "ResourceCost":
        return ResourceCost(
            self.comm_bytes + other.comm_bytes,
            self.compute_macs + other.compute_macs,
            self.mem_bytes + other.mem_bytes,
        )

    def scaled(self, f: float) -> "ResourceCost":
        return ResourceCost(
            int(self.comm_bytes * f), int(self.compute_macs * f), int(self.mem_bytes * f)
        )

    def as_dict(self) -> dict:
        return {
            "comm_bytes": self.comm_bytes,
            "compute_macs": self.compute_macs,
            "mem_bytes": self.mem_bytes,
        }

    @classmethod
    def zero(cls) -> "ResourceCost":
        return cls(0, 0, 0)


def _dense_train_cost(n_params: int, macs_fwd: int) -> ResourceCost:
    comm = BYTES_PER_PARAM * n_params
    return ResourceCost(comm, TRAIN_COMPUTE_FACTOR * macs_fwd, MEM_FACTOR * comm)


def layers_cost(layers: list[DenseLayer]) -> ResourceCost:
    params = sum(l.n_params for l in layers)
    macs = sum(l.in_dim * l.out_dim for l in layers)
    return _dense_train_cost(params, macs)


@dataclass
class Module:
    """One substitutable unit of a module layer."""

    layer_index: int
    module_index: int
    kind: str  # "shrunk" | "residual"
    width_fraction: float | None
    layers: list[DenseLayer]
    cost: ResourceCost

    def parameters(self) -> list[Tensor]:
        return [p for l in self.layers for p in l.parameters()]

    @property
    def n_params(self) -> int:
        return sum(l.n_params for l in self.layers)

    def forward(self, x: Tensor, tape: GradTape | None = None) -> Tensor:
        if self.kind == "residual":
            return x
        return forward_chain(x, self.layers, tape)

    def copy(self) -> "Module":
        return Module(
            self.layer_index,
            self.module_index,
            self.kind,
            self.width_fraction,
            [l.copy() for l in self.layers],
            self.cost,
        )


def make_shrunk_module(
    layer_index: int,
    module_index: int,
    in_dim: int,
    hidden_dim: int,
    out_dim: int,
    width_fraction: float,
    rng: np.random.Generator,
) -> Module:
    if not 0.0 < width_fraction <= 1.0:
        raise ConfigError(f"width fraction {width_fraction} outside (0, 1]")
    h = max(1, round(hidden_dim * width_fraction))
    layers = [
        dense_layer(in_dim, h, "relu", rng),
        dense_layer(h, out_dim, "relu", rng),
    ]
    return Module(layer_index, module_index, "shrunk", width_fraction, layers, layers_cost(layers))


def make_residual_module(
    layer_index: int, module_index: int, in_dim: int, out_dim: int
) -> Module:
    if in_dim != out_dim:
        raise ConfigError(
            f"residual module needs matching dims, got {in_dim} -> {out_dim}"
        )
    return Module(layer_index, module_index, "residual", None, [], ResourceCost.zero())


@dataclass
class ModuleLayer:
    index: int
    in_dim: int
    out_dim: int
    hidden_dim: int
    modules: list[Module]

    def __post_init__(self) -> None:
        if len(self.modules) < 2:
            raise ConfigError("a module layer needs at least 2 modules")
        if all(m.kind == "residual" for m in self.modules):
            raise ConfigError("a module layer needs at least one non-residual module")
        for m in self.modules:
            if m.kind == "shrunk":
                if m.layers[0].in_dim != self.in_dim or m.layers[-1].out_dim != self.out_dim:
                    raise DimensionError(
                        f"module ({m.layer_index},{m.module_index}) dims do not match layer"
                    )

    @property
    def n_modules(self) -> int:
        return len(self.modules)

    def module_indices(self) -> list[int]:
        return [m.module_index for m in self.modules]

    def parameters(self) -> list[Tensor]:
        return [p for m in self.modules for p in m.parameters()]


@dataclass(frozen=True)
class SubModelSpec:
    """Per-layer retained module indices plus provenance."""

    layers: tuple[tuple[int, ...], ...]
    device_id: int | None = None
    round_index: int | None = None

    def __post_init__(self) -> None:
        for l, idx in enumerate(self.layers):
            if len(idx) == 0:
                raise SpecError(f"spec layer {l} retains no module")
            if tuple(sorted(set(idx))) != idx:
                raise SpecError(f"spec layer {l} indices must be sorted and unique")

    def to_json(self) -> str:
        doc = {"layers": [list(s) for s in self.layers]}
        if self.device_id is not None:
            doc["device_id"] = self.device_id
        if self.round_index is not None:
            doc["round"] = self.round_index
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "SubModelSpec":
        doc = json.loads(text)
        return cls(
            layers=tuple(tuple(sorted(set(map(int, s)))) for s in doc["layers"]),
            device_id=doc.get("device_id"),
            round_index=doc.get("round"),
        )


@dataclass(frozen=True)
class ModelShape:
    """Structural description of the modularized model."""

    input_dim: int
    num_classes: int
    front_dims: tuple[int, ...] = (64,)
    num_module_layers: int = 1
    layer_width: int = 64
    layer_hidden: int = 64
    modules_per_layer: int = 16
    shrink_fractions: tuple[float, ...] = (0.25, 0.5)
    include_residual: bool = True

    def __post_init__(self) -> None:
        if self.num_module_layers < 1:
            raise ConfigError("need at least one module layer")
        if self.modules_per_layer < 2:
            raise ConfigError("modules_per_layer must be >= 2")
        if not self.shrink_fractions:
            raise ConfigError("shrink_fractions must be nonempty")

    def as_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "front_dims": list(self.front_dims),
            "num_module_layers": self.num_module_layers,
            "layer_width": self.layer_width,
            "layer_hidden": self.layer_hidden,
            "modules_per_layer": self.modules_per_layer,
            "shrink_fractions": list(self.shrink_fractions),
            "include_residual": self.include_residual,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelShape":
        return cls(
            input_dim=d["input_dim"],
            num_classes=d["num_classes"],
            front_dims=tuple(d["front_dims"]),
            num_module_layers=d["num_module_layers"],
            layer_width=d["layer_width"],
            layer_hidden=d["layer_hidden"],
            modules_per_layer=d["modules_per_layer"],
            shrink_fractions=tuple(d["shrink_fractions"]),
            include_residual=d["include_residual"],
        )


@dataclass
class ModularModel:
    shape: ModelShape
    front: list[DenseLayer]
    module_layers: list[ModuleLayer]
    head: DenseLayer
    spec: SubModelSpec | None = None  # None: full cloud model
    version: int = 0

    @property
    def n_module_layers(self) -> int:
        return len(self.module_layers)

    def module_counts(self) -> list[int]:
        # Counts of the underlying full model, not of a materialized subset.
        return [self.shape.modules_per_layer] * self.shape.num_module_layers

    def get_module(self, layer: int, index: int) -> Module:
        for m in self.module_layers[layer].modules:
            if m.module_index == index:
                return m
        raise SpecError(f"module ({layer},{index}) not present in this model")

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for l in self.front:
            params.extend(l.parameters())
        for ml in self.module_layers:
            params.extend(ml.parameters())
        params.extend(self.head.parameters())
        return params

    def n_params(self) -> int:
        return sum(p.data.size for p in self.parameters())


def modularize(shape: ModelShape, seed: int) -> ModularModel:
    """Build a freshly initialized modular model for the given shape.

    Shrunk-module widths cycle through shape.shrink_fractions; when enabled,
    the last module of each layer is the single residual bypass.
    """
    rng = stream(seed, "model-init")
    front: list[DenseLayer] = []
    d = shape.input_dim
    for width in shape.front_dims:
        front.append(dense_layer(d, width, "relu", rng))
        d = width
    if d != shape.layer_width:
        # Bridge block so module layers always see their configured width.
        front.append(dense_layer(d, shape.layer_width, "relu", rng))
        d = shape.layer_width
    layers: list[ModuleLayer] = []
    n = shape.modules_per_layer
    for l in range(shape.num_module_layers):
        modules: list[Module] = []
        n_shrunk = n - 1 if shape.include_residual else n
        for i in range(n_shrunk):
            frac = shape.shrink_fractions[i % len(shape.shrink_fractions)]
            modules.append(
                make_shrunk_module(l, i, d, shape.layer_hidden, d, frac, rng)
            )
        if shape.include_residual:
            modules.append(make_residual_module(l, n - 1, d, d))
        layers.append(ModuleLayer(l, d, d, shape.layer_hidden, modules))
    head = dense_layer(d, shape.num_classes, "identity", rng)
    return ModularModel(shape=shape, front=front, module_layers=layers, head=head)


def make_model_selector(
    shape: ModelShape,
    embed_dims: tuple[int, ...],
    k: int,
    seed: int,
    noise_scale: float = 0.0,
) -> UnifiedSelector:
    rng = stream(seed, "selector-init")
    counts = [shape.modules_per_layer] * shape.num_module_layers
    if k > min(counts):
        raise ConfigError(f"k={k} exceeds the module count of a layer")
    return make_selector(shape.input_dim, embed_dims, counts, k, rng, noise_scale)


def design_space_bits(model: ModularModel) -> int:
    """log2 of the number of per-layer module subsets (the sub-model space)."""
    return sum(ml.n_modules for ml in model.module_layers)


# ---------------------------------------------------------------------------
# forward


def layer_forward(
    layer: ModuleLayer,
    x: Tensor,
    gates: Tensor,
    active: np.ndarray,
    tape: GradTape | None = None,
    row_scale: np.ndarray | None = None,
) -> Tensor:
    """Weighted sum of activated module outputs under raw gate weights.

    gates is the [B, N] gate tensor over the layer's full module index
    range; active is [B, k'] indices into that range. row_scale optionally
    multiplies each sample's selected weights (sub-model mass rescaling).
    """
    n = gates.shape[1]
    present = set(layer.module_indices())
    if active.min() < 0 or active.max() >= n:
        raise RoutingError("activated index outside the gate range")
    used = np.unique(active)
    for i in used:
        if int(i) not in present:
            raise RoutingError(f"activated module {int(i)} not present in layer {layer.index}")
    mask = np.zeros(gates.shape)
    rows = np.arange(gates.shape[0])[:, None]
    mask[rows, active] = 1.0
    if row_scale is not None:
        mask *= row_scale[:, None]
    w = mul_const(gates, mask, tape)
    out: Tensor | None = None
    by_index = {m.module_index: m for m in layer.modules}
    for i in used:
        module = by_index[int(i)]
        term = scale_rows(col(w, int(i), tape), module.forward(x, tape), tape)
        out = term if out is None else add(out, term, tape)
    assert out is not None
    return out


def _restrict_routing(
    decision: RoutingDecision, model: ModularModel, k: int
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Top-k within retained modules plus the mass-rescaling factors.

    The factor per sample is (mass of the unrestricted top-k) / (mass of the
    restricted selection), so a sub-model containing the cloud's activated
    set reproduces the cloud forward bit-exactly, and a sparser one keeps
    its output on the cloud scale.
    """
    assert model.spec is not None
    active_list: list[np.ndarray] = []
    scale_list: list[np.ndarray] = []
    for l, ml in enumerate(model.module_layers):
        g = decision.gates[l]
        retained = np.array(ml.module_indices(), dtype=np.int64)
        k_eff = min(k, retained.size)
        sub_order = topk_rows(g[:, retained], k_eff)
        active = np.sort(retained[sub_order], axis=1)
        rows = np.arange(g.shape[0])[:, None]
        ref_mass = g[rows, topk_rows(g, min(k, g.shape[1]))].sum(axis=1)
        sel_mass = g[rows, active].sum(axis=1)
        scale_list.append(ref_mass / sel_mass)
        active_list.append(active)
    return active_list, scale_list


def model_forward(
    model: ModularModel,
    selector: UnifiedSelector,
    x: Tensor | np.ndarray,
    mode: str = "eval",
    tape: GradTape | None = None,
    rng: np.random.Generator | None = None,
    noise_scale: float | None = None,
) -> tuple[Tensor, RoutingDecision]:
    """Run front blocks, gated module layers, and head under unified routing.

    Returns the logits and the routing trace actually applied (for a
    materialized sub-model, activated sets are restricted to retained
    modules and the trace records them).
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim == 1:
        x = Tensor(x.data[None, :])
    if selector.n_layers != model.n_module_layers:
        raise ConfigError("selector layer count does not match the model")
    for head, count in zip(selector.heads, model.module_counts()):
        if head.out_dim != count:
            raise ConfigError("selector head width does not match module count")
    decision = select(selector, x, mode, tape, rng, noise_scale)
    if model.spec is not None:
        active_list, scale_list = _restrict_routing(decision, model, selector.k)
        decision = RoutingDecision(
            gates=decision.gates,
            active=active_list,
            gate_tensors=decision.gate_tensors,
        )
    else:
        scale_list = [None] * model.n_module_layers  # type: ignore[list-item]
    h = x
    for layer in model.front:
        h = dense_forward(h, layer, tape)
    gate_handles = (
        decision.gate_tensors
        if decision.gate_tensors is not None
        else [Tensor(g) for g in decision.gates]
    )
    for l, ml in enumerate(model.module_layers):
        h = layer_forward(
            ml, h, gate_handles[l], decision.active[l], tape, scale_list[l]
        )
    logits = dense_forward(h, model.head, tape)
    return logits, decision


def predict(
    model: ModularModel, selector: UnifiedSelector, x: np.ndarray, batch: int = 256
) -> np.ndarray:
    """Eval-mode argmax class predictions, batched."""
    out = np.empty(x.shape[0], dtype=np.int64)
    for s in range(0, x.shape[0], batch):
        logits, _ = model_forward(model, selector, x[s : s + batch], mode="eval")
        out[s : s + batch] = logits.data.argmax(axis=1)
    return out


def accuracy(
    model: ModularModel, selector: UnifiedSelector, x: np.ndarray, y: np.ndarray
) -> float:
    return float((predict(model, selector, x) == y).mean())


# ---------------------------------------------------------------------------
# sub-model materialization and costs


def materialize_submodel(model: ModularModel, spec: SubModelSpec) -> ModularModel:
    """Deep-copied sub-model retaining only the modules named in the spec."""
    if model.spec is not None:
        raise SpecError("can only materialize from the full cloud model")
    if len(spec.layers) != model.n_module_layers:
        raise SpecError(
            f"spec has {len(spec.layers)} layers, model has {model.n_module_layers}"
        )
    layers: list[ModuleLayer] = []
    for l, ml in enumerate(model.module_layers):
        valid = set(ml.module_indices())
        for i in spec.layers[l]:
            if i not in valid:
                raise SpecError(f"spec names unknown module ({l},{i})")
        retained = [m.copy() for m in ml.modules if m.module_index in spec.layers[l]]
        if len(retained) == 1:
            # ModuleLayer invariants require >= 2 modules on the cloud model;
            # a materialized edge model may legitimately keep a single one.
            layers.append(_single_module_layer(ml, retained))
        else:
            layers.append(
                ModuleLayer(ml.index, ml.in_dim, ml.out_dim, ml.hidden_dim, retained)
            )
    return ModularModel(
        shape=model.shape,
        front=[l.copy() for l in model.front],
        module_layers=layers,
        head=model.head.copy(),
        spec=spec,
        version=model.version,
    )


def _single_module_layer(ml: ModuleLayer, retained: list[Module]) -> ModuleLayer:
    layer = ModuleLayer.__new__(ModuleLayer)
    layer.index = ml.index
    layer.in_dim = ml.in_dim
    layer.out_dim = ml.out_dim
    layer.hidden_dim = ml.hidden_dim
    layer.modules = retained
    return layer


def selector_cost(selector: UnifiedSelector) -> ResourceCost:
    return layers_cost(selector.embed) + layers_cost(selector.heads)


def shared_cost(model: ModularModel, selector: UnifiedSelector) -> ResourceCost:
    """Cost of everything a sub-model always carries: front, head, selector."""
    return layers_cost(model.front) + layers_cost([model.head]) + selector_cost(selector)


def cost_of(
    model: ModularModel,
    selector: UnifiedSelector,
    spec: SubModelSpec | None = None,
) -> ResourceCost:
    """Componentwise sum over retained modules plus the shared parts."""
    total = shared_cost(model, selector)
    if spec is None:
        for ml in model.module_layers:
            for m in ml.modules:
                total = total + m.cost
    else:
        for l, retained in enumerate(spec.layers):
            for i in retained:
                total = total + model.get_module(l, i).cost
    return total


# ---------------------------------------------------------------------------
# canonical array naming (serialization, aggregation, divergence)


def model_arrays(model: ModularModel) -> list[tuple[str, np.ndarray]]:
    arrays: list[tuple[str, np.ndarray]] = []
    for i, l in enumerate(model.front):
        arrays.append((f"front.{i}.w", l.w.data))
        arrays.append((f"front.{i}.b", l.b.data))
    for ml in model.module_layers:
        for m in ml.modules:
            for j, dl in enumerate(m.layers):
                arrays.append((f"mod.{m.layer_index}.{m.module_index}.{j}.w", dl.w.data))
                arrays.append((f"mod.{m.layer_index}.{m.module_index}.{j}.b", dl.b.data))
    arrays.append(("head.w", model.head.w.data))
    arrays.append(("head.b", model.head.b.data))
    return arrays


def selector_arrays(selector: UnifiedSelector) -> list[tuple[str, np.ndarray]]:
    arrays: list[tuple[str, np.ndarray]] = []
    for i, l in enumerate(selector.embed):
        arrays.append((f"sel.embed.{i}.w", l.w.data))
        arrays.append((f"sel.embed.{i}.b", l.b.data))
    for l, h in enumerate(selector.heads):
        arrays.append((f"sel.head.{l}.w", h.w.data))
        arrays.append((f"sel.head.{l}.b", h.b.data))
    return arrays


def set_named_arrays(
    model: ModularModel, selector: UnifiedSelector, arrays: dict[str, np.ndarray]
) -> None:
    """Overwrite parameters in place from a canonical name -> array mapping."""
    targets = dict(model_arrays(model) + selector_arrays(selector))
    for name, value in arrays.items():
        if name not in targets:
            raise CheckpointError(f"unknown array '{name}'")
        if targets[name].shape != value.shape:
            raise CheckpointError(f"shape mismatch for '{name}'")
        targets[name][...] = value


# ---------------------------------------------------------------------------
# checkpoint bundle


def _module_meta(model: ModularModel) -> list[dict]:
    out = []
    for ml in model.module_layers:
        out.append(
            {
                "index": ml.index,
                "in_dim": ml.in_dim,
                "out_dim": ml.out_dim,
                "hidden_dim": ml.hidden_dim,
                "modules": [
                    {
                        "index": m.module_index,
                        "kind": m.kind,
                        "width_fraction": m.width_fraction,
                    }
                    for m in ml.modules
                ],
            }
        )
    return out


def encode_model_bundle(
    model: ModularModel, selector: UnifiedSelector, extra_meta: dict | None = None
) -> bytes:
    meta = {
        "format": 1,
        "version": model.version,
        "shape": model.shape.as_dict(),
        "layers": _module_meta(model),
        "selector": {
            "embed_dims": [l.out_dim for l in selector.embed],
            "k": selector.k,
            "noise_scale": selector.noise_scale,
        },
        "spec": None if model.spec is None else json.loads(model.spec.to_json()),
    }
    if extra_meta:
        meta["extra"] = extra_meta
    return encode_bundle(meta, model_arrays(model) + selector_arrays(selector))


def decode_model_bundle(blob: bytes) -> tuple[ModularModel, UnifiedSelector, dict]:
    meta, arrays = decode_bundle(blob)
    if meta.get("format") != 1:
        raise CheckpointError("unsupported bundle format")
    shape = ModelShape.from_dict(meta["shape"])
    seed_rng = stream(0, "bundle-scratch")  # placeholder init, overwritten below
    front: list[DenseLayer] = []
    d = shape.input_dim
    for width in shape.front_dims:
        front.append(dense_layer(d, width, "relu", seed_rng))
        d = width
    if d != shape.layer_width:
        front.append(dense_layer(d, shape.layer_width, "relu", seed_rng))
        d = shape.layer_width
    layers: list[ModuleLayer] = []
    for lmeta in meta["layers"]:
        mods: list[Module] = []
        for mmeta in lmeta["modules"]:
            if mmeta["kind"] == "residual":
                mods.append(
                    make_residual_module(
                        lmeta["index"], mmeta["index"], lmeta["in_dim"], lmeta["out_dim"]
                    )
                )
            else:
                mods.append(
                    make_shrunk_module(
                        lmeta["index"],
                        mmeta["index"],
                        lmeta["in_dim"],
                        lmeta["hidden_dim"],
                        lmeta["out_dim"],
                        mmeta["width_fraction"],
                        seed_rng,
                    )
                )
        if len(mods) == 1:
            proto = ModuleLayer(
                lmeta["index"], lmeta["in_dim"], lmeta["out_dim"], lmeta["hidden_dim"],
                mods + mods,
            )
            layers.append(_single_module_layer(proto, mods))
        else:
            layers.append(
                ModuleLayer(
                    lmeta["index"], lmeta["in_dim"], lmeta["out_dim"], lmeta["hidden_dim"], mods
                )
            )
    head = dense_layer(d, shape.num_classes, "identity", seed_rng)
    spec = None
    if meta["spec"] is not None:
        spec = SubModelSpec.from_json(json.dumps(meta["spec"]))
    model = ModularModel(
        shape=shape,
        front=front,
        module_layers=layers,
        head=head,
        spec=spec,
        version=meta["version"],
    )
    smeta = meta["selector"]
    # Selector heads always span the full module index range, sub-model or not.
    sel_counts = [shape.modules_per_layer] * shape.num_module_layers
    selector = make_selector(
        shape.input_dim,
        tuple(smeta["embed_dims"]),
        sel_counts,
        smeta["k"],
        seed_rng,
        smeta["noise_scale"],
    )
    set_named_arrays(model, selector, arrays)
    extra = meta.get("extra", {})
    return model, selector, extra
