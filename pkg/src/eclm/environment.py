"""Simulated device fleet: non-IID partitioning, data shift, resource tiers
and fluctuation, on-device training, and CSV ingestion.

All sampling is driven by caller-provided generators from rng.stream so a
scenario's environment events are identical across strategies and runs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .aggregation import DeviceUpdate, update_from_submodel
from .data import Dataset, minibatches
from .derivation import ImportanceVector, ResourceBudget
from .errors import ConfigError, DataError
from .modular import ModularModel, ResourceCost, SubModelSpec, accuracy
from .nn.layers import SgdConfig, sgd_step
from .nn.tensor import GradTape, backward, cross_entropy
from .modular import model_forward
from .selector import UnifiedSelector


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Gaussian cluster classification task.

    Cluster means are drawn from N(0, mean_scale^2 I) and re-drawn until all
    pairwise distances reach margin * sigma; margin 0 allows arbitrary
    overlap (harder tasks). drift_step translates all means by a fixed
    random direction of that length per environment drift event.
    """

    n_classes: int = 8
    input_dim: int = 32
    clusters_per_class: int = 2
    sigma: float = 1.0
    mean_scale: float = 1.0
    margin: float = 4.0
    drift_step: float = 0.0

    def cluster_means(self, rng: np.random.Generator) -> np.ndarray:
        total = self.n_classes * self.clusters_per_class
        for _ in range(200):
            means = rng.normal(0.0, self.mean_scale, size=(total, self.input_dim))
            if total == 1:
                return means
            d = np.linalg.norm(means[:, None] - means[None, :], axis=2)
            d[np.diag_indices(total)] = np.inf
            if d.min() >= self.margin * self.sigma:
                return means
        raise ConfigError(
            "could not satisfy the cluster margin; lower margin or raise mean_scale"
        )

    def sample(
        self,
        means: np.ndarray,
        count_per_class: int,
        rng: np.random.Generator,
    ) -> Dataset:
        xs, ys = [], []
        for c in range(self.n_classes):
            owned = means[c * self.clusters_per_class : (c + 1) * self.clusters_per_class]
            picks = rng.integers(0, len(owned), size=count_per_class)
            noise = rng.normal(0.0, self.sigma, size=(count_per_class, self.input_dim))
            xs.append(owned[picks] + noise)
            ys.append(np.full(count_per_class, c, dtype=np.int64))
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        order = rng.permutation(len(y))
        return Dataset(x[order], y[order])


@dataclass(frozen=True)
class DynamicsConfig:
    shift_fraction: float = 0.5
    shift_period: int = 10  # rounds between shift events; 0 disables
    fluctuation_range: tuple[float, float] = (1.0, 1.0)
    class_drift: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.shift_fraction <= 1.0:
            raise ConfigError("shift_fraction must lie in [0, 1]")
        lo, hi = self.fluctuation_range
        if not 0.0 < lo <= hi:
            raise ConfigError("fluctuation_range must be 0 < lo <= hi")


@dataclass
class DeviceState:
    device_id: int
    data: Dataset
    classes: tuple[int, ...]
    subtask_id: int
    base_budget: ResourceBudget
    budget: ResourceBudget
    tier: float
    spec: SubModelSpec | None = None
    spec_round: int | None = None
    stale_env: bool = True  # environment changed since the spec was derived
    personal_arrays: dict | None = None  # local_only strategy keeps params here


class SamplePool:
    """Per-class queues over a source dataset; draws without replacement
    until a class runs dry, then recycles that class with replacement."""

    def __init__(self, source: Dataset, rng: np.random.Generator):
        self._source = source
        self._queues: dict[int, list[int]] = {}
        self._rng = rng
        self.replacement_used = False
        for c in np.unique(source.y):
            idx = np.where(source.y == c)[0]
            self._queues[int(c)] = list(rng.permutation(idx))

    def classes(self) -> list[int]:
        return sorted(self._queues)

    def draw(self, cls: int, count: int) -> np.ndarray:
        if cls not in self._queues:
            raise DataError(f"class {cls} not present in the pool")
        out = []
        q = self._queues[cls]
        for _ in range(count):
            if not q:
                all_idx = np.where(self._source.y == cls)[0]
                q.extend(self._rng.permutation(all_idx))
                self.replacement_used = True
            out.append(q.pop())
        return self._source.x[np.array(out, dtype=np.int64)]


def partition_noniid(
    pool: SamplePool,
    num_devices: int,
    m: int,
    size_range: tuple[int, int],
    rng: np.random.Generator,
    subtask_groups: list[tuple[int, ...]] | None = None,
) -> list[tuple[tuple[int, ...], int, Dataset]]:
    """Assign each device m distinct classes and a label-skewed local dataset.

    With subtask_groups, devices are stratified over sub-tasks and draw their
    m classes from the assigned group. Returns (classes, subtask_id, data)
    per device.
    """
    classes_all = pool.classes()
    n = len(classes_all)
    if m > n:
        raise ConfigError(f"m={m} exceeds the {n} available classes")
    lo, hi = size_range
    if lo < 1 or hi < lo:
        raise ConfigError("invalid size_range")
    out = []
    order = rng.permutation(num_devices)
    # stratified sub-task assignment: shuffled devices take groups round-robin
    assignment = {}
    if subtask_groups is not None:
        for pos, dev in enumerate(order):
            assignment[int(dev)] = pos % len(subtask_groups)
    for d in range(num_devices):
        if subtask_groups is not None:
            tid = assignment[d]
            group = [c for c in subtask_groups[tid] if c in classes_all]
            if len(group) < m:
                raise ConfigError(
                    f"sub-task {tid} has {len(group)} classes, device needs {m}"
                )
            chosen = tuple(sorted(rng.choice(group, size=m, replace=False).tolist()))
        else:
            tid = -1
            chosen = tuple(sorted(rng.choice(classes_all, size=m, replace=False).tolist()))
        size = int(rng.integers(lo, hi + 1))
        per_class = np.full(m, size // m)
        per_class[rng.choice(m, size=size % m, replace=False)] += 1
        xs, ys = [], []
        for c, cnt in zip(chosen, per_class):
            xs.append(pool.draw(int(c), int(cnt)))
            ys.append(np.full(int(cnt), c, dtype=np.int64))
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        perm = rng.permutation(len(y))
        out.append((chosen, tid, Dataset(x[perm], y[perm])))
    return out


def shift_data(
    device: DeviceState,
    fraction: float,
    pool: SamplePool,
    rng: np.random.Generator,
    class_drift: bool = False,
) -> int:
    """Replace floor(fraction * |D|) uniformly chosen samples with fresh ones.

    Replacements preserve each replaced sample's class, so the device's class
    composition is stable; class_drift first swaps one assigned class for an
    unseen one. Dataset size never changes. Returns the replaced count.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError("shift fraction must lie in [0, 1]")
    data = device.data
    if class_drift:
        available = [c for c in pool.classes() if c not in device.classes]
        if available:
            old = int(rng.choice(list(device.classes)))
            new = int(rng.choice(available))
            device.classes = tuple(sorted(c for c in device.classes if c != old) + [new])
            old_rows = np.where(data.y == old)[0]
            if old_rows.size:
                data.x[old_rows] = pool.draw(new, old_rows.size)
                data.y[old_rows] = new
    count = int(np.floor(fraction * len(data)))
    if count == 0:
        return 0
    rows = rng.choice(len(data), size=count, replace=False)
    for r in rows:
        cls = int(data.y[r])
        data.x[r] = pool.draw(cls, 1)[0]
    device.stale_env = True
    return count


def sample_resources(
    full_cost: ResourceCost,
    tiers: list[float],
    num_devices: int,
    rng: np.random.Generator,
    forced_min: ResourceCost | None = None,
) -> list[tuple[float, ResourceBudget]]:
    """Stratified tier assignment; budget = tier fraction of the full cost."""
    if not tiers or min(tiers) <= 0:
        raise ConfigError("resource tiers must be positive fractions")
    if forced_min is not None:
        for tier in tiers:
            scaled = full_cost.scaled(tier)
            for dim in ("comm_bytes", "compute_macs", "mem_bytes"):
                if getattr(scaled, dim) < getattr(forced_min, dim):
                    raise ConfigError(
                        f"tier {tier} cannot fit the forced minimum sub-model ({dim})"
                    )
    order = rng.permutation(num_devices)
    out: list[tuple[float, ResourceBudget]] = [None] * num_devices  # type: ignore
    for pos, dev in enumerate(order):
        tier = float(tiers[pos % len(tiers)])
        out[int(dev)] = (tier, ResourceBudget.from_cost(full_cost.scaled(tier)))
    return out


def fluctuate(
    base: ResourceBudget, factor_range: tuple[float, float], rng: np.random.Generator
) -> ResourceBudget:
    """Scale compute/memory (not communication) by a per-round factor."""
    lo, hi = factor_range
    f = float(rng.uniform(lo, hi))
    return ResourceBudget(
        base.comm_bytes,
        max(1, int(base.compute_macs * f)),
        max(1, int(base.mem_bytes * f)),
    )


def local_train(
    submodel: ModularModel,
    selector: UnifiedSelector,
    data: Dataset,
    epochs: int,
    cfg: SgdConfig,
    rng: np.random.Generator,
    importance: ImportanceVector,
    device_id: int,
) -> tuple[DeviceUpdate | None, dict]:
    """Plain on-device SGD over the materialized sub-model (CE loss only).

    Returns (update, metrics); the update is withheld (None) if the loss
    diverges, with the reason in the metrics.
    """
    params = submodel.parameters() + selector.parameters()
    pre_acc = accuracy(submodel, selector, data.x, data.y)
    diverged = False
    for _ in range(epochs):
        for idx in minibatches(len(data), cfg.batch_size, rng):
            tape = GradTape()
            # on-device training routes noise-free
            logits, _ = model_forward(
                submodel, selector, data.x[idx], "train", tape, noise_scale=0.0
            )
            loss = cross_entropy(logits, data.y[idx], tape)
            if not np.isfinite(loss.item()):
                diverged = True
                break
            grads = backward(tape, loss)
            sgd_step(params, grads, cfg)
        if diverged:
            break
    post_acc = accuracy(submodel, selector, data.x, data.y)
    metrics = {
        "pre_accuracy": pre_acc,
        "post_accuracy": post_acc,
        "samples": len(data),
        "diverged": diverged,
    }
    if diverged:
        return None, metrics
    update = update_from_submodel(submodel, selector, importance, len(data), device_id)
    return update, metrics


# ---------------------------------------------------------------------------
# CSV ingestion


def ingest_csv(path: str, label_column: int = -1) -> tuple[Dataset, dict]:
    """Load a numeric-feature CSV with one integer label column.

    An optional single header row is detected and skipped. Labels are
    remapped to contiguous 0..K-1 (mapping reported in the meta dict).
    Parse failures raise DataError with the offending row number.
    """
    rows: list[list[str]] = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row:
                rows.append(row)
    if not rows:
        raise DataError(f"{path}: empty file")
    start = 0
    try:
        [float(v) for v in rows[0]]
    except ValueError:
        start = 1  # header row
    if start == len(rows):
        raise DataError(f"{path}: no data rows")
    width = len(rows[start])
    label_idx = label_column if label_column >= 0 else width + label_column
    feats, labels = [], []
    for rnum, row in enumerate(rows[start:], start=start + 1):
        if len(row) != width:
            raise DataError(f"{path}: row {rnum} has {len(row)} columns, expected {width}")
        try:
            vals = [float(v) for v in row]
        except ValueError as e:
            raise DataError(f"{path}: row {rnum}: {e}") from e
        raw_label = vals[label_idx]
        if raw_label != int(raw_label):
            raise DataError(f"{path}: row {rnum}: non-integer label {raw_label}")
        labels.append(int(raw_label))
        feats.append([v for i, v in enumerate(vals) if i != label_idx])
    x = np.array(feats, dtype=np.float64)
    uniq = sorted(set(labels))
    mapping = {c: i for i, c in enumerate(uniq)}
    y = np.array([mapping[c] for c in labels], dtype=np.int64)
    meta = {"label_mapping": mapping, "n_classes": len(uniq), "n_features": x.shape[1]}
    return Dataset(x, y), meta


def standardize_features(
    train: Dataset, *others: Dataset
) -> tuple[list[Dataset], dict]:
    """Z-score all datasets using the training split's per-column stats.

    Zero-variance columns standardize to 0 and are reported as warnings.
    """
    mean = train.x.mean(axis=0)
    std = train.x.std(axis=0)
    degenerate = np.where(std == 0.0)[0].tolist()
    safe = np.where(std == 0.0, 1.0, std)
    out = []
    for ds in (train, *others):
        x = (ds.x - mean) / safe
        x[:, std == 0.0] = 0.0
        out.append(Dataset(x, ds.y, ds.subtask_ids))
    meta = {"mean": mean, "std": std, "degenerate_columns": degenerate}
    return out, meta
