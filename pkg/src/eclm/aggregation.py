"""Edge-to-cloud merge: module-wise importance-weighted averaging.

Each module is averaged over the devices whose sub-model contained it,
weighted by their (per-module, contributor-normalized) importance scores.
Modules nobody trained stay bit-identical. Shared blocks, the head, and the
selector average FedAvg-style by sample count. Summation always runs in
ascending device-id order so results are bit-reproducible regardless of
arrival order.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .derivation import ImportanceVector
from .errors import DataError, StalenessError
from .modular import (
    ModularModel,
    SubModelSpec,
    materialize_submodel,
    model_arrays,
    selector_arrays,
    set_named_arrays,
)
from .selector import UnifiedSelector

_MOD_NAME = re.compile(r"^mod\.(\d+)\.(\d+)\.")


@dataclass
class DeviceUpdate:
    """One device's trained parameters plus the metadata aggregation needs."""

    device_id: int
    version: int
    spec: SubModelSpec
    arrays: dict[str, np.ndarray]
    importance: ImportanceVector
    sample_count: int


@dataclass
class AggregationReport:
    contributors: dict[str, int] = field(default_factory=dict)
    weights: dict[str, list[float]] = field(default_factory=dict)
    delta_norms: dict[str, float] = field(default_factory=dict)
    untouched: list[str] = field(default_factory=list)
    rejected_stale: list[int] = field(default_factory=list)


def update_from_submodel(
    submodel: ModularModel,
    selector: UnifiedSelector,
    importance: ImportanceVector,
    sample_count: int,
    device_id: int,
) -> DeviceUpdate:
    """Snapshot a trained sub-model + selector into an update payload."""
    if submodel.spec is None:
        spec = SubModelSpec(
            layers=tuple(tuple(ml.module_indices()) for ml in submodel.module_layers),
            device_id=device_id,
        )
    else:
        spec = submodel.spec
    arrays = {
        name: arr.copy()
        for name, arr in model_arrays(submodel) + selector_arrays(selector)
    }
    return DeviceUpdate(
        device_id=device_id,
        version=submodel.version,
        spec=spec,
        arrays=arrays,
        importance=importance,
        sample_count=sample_count,
    )


def _module_key(name: str) -> tuple[int, int] | None:
    m = _MOD_NAME.match(name)
    if m is None:
        return None
    return int(m.group(1)), int(m.group(2))


def aggregate(
    model: ModularModel,
    selector: UnifiedSelector,
    updates: list[DeviceUpdate],
    mode: str = "importance",
) -> tuple[ModularModel, UnifiedSelector, AggregationReport]:
    """Merge device updates into a fresh cloud model + selector.

    mode 'importance' weighs each module's contributors by their normalized
    importance scores; mode 'samples' weighs them by sample count (plain
    FedAvg behavior for full-model baselines). Shared parts always average
    by sample count. Stale updates (wrong base version) are rejected and
    reported, not fatal -- unless nothing valid remains. The returned
    model's version is bumped.
    """
    if not updates:
        raise DataError("aggregate needs at least one update")
    if mode not in ("importance", "samples"):
        raise DataError(f"unknown aggregation mode '{mode}'")
    report = AggregationReport()
    valid = []
    for u in sorted(updates, key=lambda u: u.device_id):
        if u.version != model.version:
            report.rejected_stale.append(u.device_id)
        else:
            valid.append(u)
    if not valid:
        raise StalenessError(
            f"all {len(updates)} updates were built against a stale version"
        )

    base_arrays = dict(model_arrays(model) + selector_arrays(selector))
    new_arrays: dict[str, np.ndarray] = {}

    # module parameters: importance-weighted over contributors
    for name, base in base_arrays.items():
        key = _module_key(name)
        if key is None:
            continue
        layer, index = key
        contribs = [u for u in valid if name in u.arrays]
        if not contribs:
            continue
        if mode == "importance":
            weights = np.array([u.importance.get(layer, index) for u in contribs])
        else:
            weights = np.array([u.sample_count for u in contribs], dtype=np.float64)
        total = weights.sum()
        weights = (
            weights / total if total > 0 else np.full(len(contribs), 1.0 / len(contribs))
        )
        acc = np.zeros_like(base)
        for w, u in zip(weights, contribs):
            acc += w * u.arrays[name]
        new_arrays[name] = acc
        mod_label = f"mod.{layer}.{index}"
        if mod_label not in report.contributors:
            report.contributors[mod_label] = len(contribs)
            report.weights[mod_label] = [float(w) for w in weights]

    # shared parts: sample-count weighted over every valid update
    counts = np.array([u.sample_count for u in valid], dtype=np.float64)
    shared_w = counts / counts.sum()
    for name, base in base_arrays.items():
        if _module_key(name) is not None or name in new_arrays:
            continue
        acc = np.zeros_like(base)
        for w, u in zip(shared_w, valid):
            acc += w * u.arrays[name]
        new_arrays[name] = acc

    # untouched modules and delta norms
    for ml in model.module_layers:
        for m in ml.modules:
            label = f"mod.{m.layer_index}.{m.module_index}"
            if m.kind != "residual" and label not in report.contributors:
                report.untouched.append(label)
    for name, arr in new_arrays.items():
        delta = arr - base_arrays[name]
        label = name
        key = _module_key(name)
        if key is not None:
            label = f"mod.{key[0]}.{key[1]}"
        report.delta_norms[label] = report.delta_norms.get(label, 0.0) + float(
            np.sum(delta * delta)
        )
    report.delta_norms = {k: float(np.sqrt(v)) for k, v in report.delta_norms.items()}

    new_model = materialize_submodel_free_copy(model)
    new_selector = selector.copy()
    set_named_arrays(new_model, new_selector, new_arrays)
    new_model.version = model.version + 1
    return new_model, new_selector, report


def materialize_submodel_free_copy(model: ModularModel) -> ModularModel:
    """Deep copy of the full cloud model (spec-free)."""
    full_spec = SubModelSpec(
        layers=tuple(tuple(ml.module_indices()) for ml in model.module_layers)
    )
    clone = materialize_submodel(model, full_spec)
    clone.spec = None
    clone.version = model.version
    return clone


def divergence_metric(
    model: ModularModel,
    selector: UnifiedSelector,
    updates: list[DeviceUpdate],
) -> dict:
    """Variance across devices of parameter deltas, for commonly held groups.

    For every parameter group at least two devices updated, computes the
    per-coordinate population variance of (update - base) and averages over
    coordinates; reports per layer group and the coordinate-weighted overall.
    Returns {'overall': None, ...} when no group overlaps.
    """
    base_arrays = dict(model_arrays(model) + selector_arrays(selector))
    valid = sorted(
        (u for u in updates if u.version == model.version), key=lambda u: u.device_id
    )
    group_var_sum: dict[str, float] = {}
    group_coords: dict[str, int] = {}
    for name, base in base_arrays.items():
        contribs = [u.arrays[name] for u in valid if name in u.arrays]
        if len(contribs) < 2:
            continue
        deltas = np.stack([a - base for a in contribs])
        var = deltas.var(axis=0)  # population variance across devices
        key = _module_key(name)
        if key is not None:
            label = f"module_layer_{key[0]}"
        elif name.startswith("front."):
            label = "front"
        elif name.startswith("head."):
            label = "head"
        else:
            label = "selector"
        group_var_sum[label] = group_var_sum.get(label, 0.0) + float(var.sum())
        group_coords[label] = group_coords.get(label, 0) + var.size
    if not group_var_sum:
        return {"overall": None, "per_group": {}}
    per_group = {k: group_var_sum[k] / group_coords[k] for k in group_var_sum}
    overall = sum(group_var_sum.values()) / sum(group_coords.values())
    return {"overall": overall, "per_group": per_group}
