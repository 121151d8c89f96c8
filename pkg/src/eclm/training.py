"""Offline cloud stage: end-to-end pretraining with load balancing, the
sub-task/module map, the capped 0/1 assignment program, and KL-guided
fine-tuning.

The assignment program maximizes the retained task-map mass subject to a
per-module cap (kappa1, count of assigned sub-tasks by default) and a
per-sub-task cap (kappa2, number of usable modules). Small instances are
solved exactly by exhaustive search or branch-and-bound; larger ones fall
back to a greedy with a reported optimality-bound gap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, minibatches
from .errors import ConfigError, DataError, TrainingDivergedError
from .modular import ModularModel, accuracy, model_forward
from .nn.layers import SgdConfig, sgd_step
from .nn.tensor import GradTape, Tensor, add, backward, cross_entropy, scale
from .selector import (
    UnifiedSelector,
    kl_guidance_loss,
    load_balance_loss,
    routing_stats,
    select,
)

COLLAPSE_LOAD = 0.9  # a layer whose max module load exceeds this is flagged

EXACT_CELL_LIMIT = 400  # guaranteed-exact regime for the assignment solver
EXHAUSTIVE_CELL_LIMIT = 12

_PRUNE_EPS = 1e-12


@dataclass(frozen=True)
class SubTask:
    id: int
    classes: tuple[int, ...]


def make_subtasks(groups: list[list[int]]) -> list[SubTask]:
    return [SubTask(i, tuple(sorted(g))) for i, g in enumerate(groups)]


def validate_subtasks(subtasks: list[SubTask], n_classes: int) -> None:
    if len(subtasks) < 2:
        raise ConfigError("need at least 2 sub-tasks")
    covered = set()
    for t in subtasks:
        if not t.classes:
            raise ConfigError(f"sub-task {t.id} has no classes")
        covered.update(t.classes)
    if covered != set(range(n_classes)):
        raise ConfigError("sub-tasks must cover every class exactly once or more")


def label_subtask_lookup(subtasks: list[SubTask], n_classes: int) -> np.ndarray:
    """class label -> sub-task id; overlapping definitions resolve to the first."""
    lookup = np.full(n_classes, -1, dtype=np.int64)
    for t in subtasks:
        for c in t.classes:
            if lookup[c] < 0:
                lookup[c] = t.id
    return lookup


def annotate_subtasks(data: Dataset, subtasks: list[SubTask], n_classes: int) -> Dataset:
    lookup = label_subtask_lookup(subtasks, n_classes)
    return Dataset(data.x, data.y, lookup[data.y])


@dataclass
class TaskMapMatrix:
    """Row-normalized per-sub-task gate mass over modules, one matrix per layer."""

    per_layer: list[np.ndarray]
    subtask_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        for h in self.per_layer:
            if not np.allclose(h.sum(axis=1), 1.0, atol=1e-9):
                raise DataError("task-map rows must sum to 1")


@dataclass
class AssignmentMask:
    per_layer: list[np.ndarray]
    kappa1: float
    kappa2: int
    cap_mode: str
    info: list[dict] = field(default_factory=list)


@dataclass
class TargetMapping:
    """P = H * M per layer, with renormalized per-sub-task rows g_label."""

    per_layer: list[np.ndarray]
    rows: list[np.ndarray]
    masks: list[np.ndarray]
    repairs: list[tuple[int, int]] = field(default_factory=list)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 60
    lambda_balance: float = 0.1
    lr: float = 0.001
    batch_size: int = 16
    noise_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.lambda_balance < 0:
            raise ConfigError("lambda_balance must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


def _eval_loads(
    model: ModularModel, selector: UnifiedSelector, data: Dataset, batch: int = 256
) -> list[np.ndarray]:
    sums = [np.zeros(h.out_dim) for h in selector.heads]
    for s in range(0, len(data), batch):
        dec = select(selector, Tensor(data.x[s : s + batch]), "eval")
        for l, g in enumerate(dec.gates):
            sums[l] += g.sum(axis=0)
    return [s / len(data) for s in sums]


def pretrain(
    model: ModularModel,
    selector: UnifiedSelector,
    data: Dataset,
    cfg: PretrainConfig,
    rng: np.random.Generator,
    quiet: bool = True,
) -> tuple[ModularModel, UnifiedSelector, list[dict]]:
    """Minimize CE + lambda * load-balance by mini-batch SGD.

    Selection noise anneals linearly from cfg.noise_scale to zero across
    epochs. The log carries per-epoch losses, train accuracy, per-layer load
    histograms, and a module-collapse flag.
    """
    if len(data) == 0:
        raise DataError("pretraining needs a nonempty proxy dataset")
    if data.y.max() >= model.shape.num_classes:
        raise DataError("proxy labels exceed the model's class count")
    sgd = SgdConfig(learning_rate=cfg.lr, batch_size=cfg.batch_size)
    params = model.parameters() + selector.parameters()
    log: list[dict] = []
    for epoch in range(cfg.epochs):
        noise = (
            cfg.noise_scale * (cfg.epochs - 1 - epoch) / (cfg.epochs - 1)
            if cfg.epochs > 1
            else 0.0
        )
        ce_sum = lb_sum = 0.0
        n_batches = 0
        for idx in minibatches(len(data), cfg.batch_size, rng):
            tape = GradTape()
            logits, dec = model_forward(
                model, selector, data.x[idx], "train", tape, rng, noise
            )
            ce = cross_entropy(logits, data.y[idx], tape)
            lb = load_balance_loss(routing_stats(dec, tape), tape)
            loss = add(ce, scale(lb, cfg.lambda_balance, tape), tape)
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError(
                    f"pretrain loss non-finite at epoch {epoch}, batch {n_batches}"
                )
            grads = backward(tape, loss)
            sgd_step(params, grads, sgd)
            ce_sum += ce.item()
            lb_sum += lb.item()
            n_batches += 1
        loads = _eval_loads(model, selector, data)
        record = {
            "epoch": epoch,
            "loss_ce": ce_sum / n_batches,
            "loss_balance": lb_sum / n_batches,
            "accuracy": accuracy(model, selector, data.x, data.y),
            "loads": [l.tolist() for l in loads],
            "max_load": max(float(l.max()) for l in loads),
            "collapsed": bool(any(l.max() > COLLAPSE_LOAD for l in loads)),
            "noise_scale": noise,
        }
        log.append(record)
        if not quiet:
            print(
                f"pretrain epoch {epoch}: ce={record['loss_ce']:.4f} "
                f"lb={record['loss_balance']:.4f} acc={record['accuracy']:.4f}"
                + (" [collapse]" if record["collapsed"] else "")
            )
    return model, selector, log


def build_task_map(
    selector: UnifiedSelector, data: Dataset, batch: int = 256
) -> TaskMapMatrix:
    """Mean gate mass per (sub-task, module), rows normalized."""
    if data.subtask_ids is None:
        raise DataError("task map needs sub-task annotated data")
    ids = np.unique(data.subtask_ids)
    t_count = int(ids.max()) + 1
    if set(ids.tolist()) != set(range(t_count)):
        raise DataError("every sub-task needs at least one sample")
    sums = [np.zeros((t_count, h.out_dim)) for h in selector.heads]
    counts = np.zeros(t_count)
    for s in range(0, len(data), batch):
        sl = slice(s, s + batch)
        dec = select(selector, Tensor(data.x[sl]), "eval")
        tids = data.subtask_ids[sl]
        for l, g in enumerate(dec.gates):
            np.add.at(sums[l], tids, g)
        np.add.at(counts, tids, 1)
    per_layer = []
    for l in range(len(sums)):
        h = sums[l] / counts[:, None]
        per_layer.append(h / h.sum(axis=1, keepdims=True))
    return TaskMapMatrix(per_layer, tuple(range(t_count)))


# ---------------------------------------------------------------------------
# assignment program


def _col_feasible(col_used: float, value: float, kappa1: float, cap_mode: str) -> bool:
    if cap_mode == "count":
        return col_used + 1 <= kappa1
    return col_used + value <= kappa1 + _PRUNE_EPS


def _col_usage(value: float, cap_mode: str) -> float:
    return 1.0 if cap_mode == "count" else value


def _greedy_assign(
    cells: list[tuple[float, int, int]],
    shape: tuple[int, int],
    kappa1: float,
    kappa2: int,
    cap_mode: str,
) -> np.ndarray:
    t_count, n_count = shape
    mask = np.zeros(shape, dtype=np.int8)
    row_used = np.zeros(t_count)
    col_used = np.zeros(n_count)
    for value, t, n in cells:
        if row_used[t] + 1 <= kappa2 and _col_feasible(col_used[n], value, kappa1, cap_mode):
            mask[t, n] = 1
            row_used[t] += 1
            col_used[n] += _col_usage(value, cap_mode)
    return mask


def _relaxed_bound(
    cells: list[tuple[float, int, int]],
    start: int,
    row_used: np.ndarray,
    col_used: np.ndarray,
    kappa1: float,
    kappa2: int,
    cap_mode: str,
) -> float:
    """min(row-capped, col-capped) optimistic completion from cells[start:]."""
    row_left = (kappa2 - row_used).copy()
    bound_row = 0.0
    for value, t, _ in cells[start:]:
        if row_left[t] >= 1:
            row_left[t] -= 1
            bound_row += value
    col_left = (kappa1 - col_used).copy()
    bound_col = 0.0
    for value, _, n in cells[start:]:
        usage = _col_usage(value, cap_mode)
        if col_left[n] >= usage - _PRUNE_EPS:
            col_left[n] -= usage
            bound_col += value
    return min(bound_row, bound_col)


def _solve_bnb(
    h: np.ndarray, kappa1: float, kappa2: int, cap_mode: str
) -> tuple[np.ndarray, dict]:
    t_count, n_count = h.shape
    cells = sorted(
        ((float(h[t, n]), t, n) for t in range(t_count) for n in range(n_count)),
        key=lambda c: (-c[0], c[1], c[2]),
    )
    best_mask = _greedy_assign(cells, h.shape, kappa1, kappa2, cap_mode)
    best = float(h[best_mask.astype(bool)].sum())
    row_used = np.zeros(t_count)
    col_used = np.zeros(n_count)
    chosen: list[tuple[int, int]] = []
    nodes = 0

    def dfs(d: int, value: float) -> None:
        nonlocal best, best_mask, nodes
        nodes += 1
        if d == len(cells):
            if value > best + _PRUNE_EPS:
                best = value
                m = np.zeros(h.shape, dtype=np.int8)
                for t, n in chosen:
                    m[t, n] = 1
                best_mask = m
            return
        ub = value + _relaxed_bound(cells, d, row_used, col_used, kappa1, kappa2, cap_mode)
        if ub <= best + _PRUNE_EPS:
            return
        v, t, n = cells[d]
        if row_used[t] + 1 <= kappa2 and _col_feasible(col_used[n], v, kappa1, cap_mode):
            row_used[t] += 1
            col_used[n] += _col_usage(v, cap_mode)
            chosen.append((t, n))
            dfs(d + 1, value + v)
            chosen.pop()
            row_used[t] -= 1
            col_used[n] -= _col_usage(v, cap_mode)
        dfs(d + 1, value)

    dfs(0, 0.0)
    return best_mask, {"method": "bnb", "nodes": nodes}


def _solve_exhaustive(
    h: np.ndarray, kappa1: float, kappa2: int, cap_mode: str
) -> tuple[np.ndarray, dict]:
    t_count, n_count = h.shape
    cells = [(t, n) for t in range(t_count) for n in range(n_count)]
    best = -1.0
    best_mask = np.zeros(h.shape, dtype=np.int8)
    for bits in range(1 << len(cells)):
        mask = np.zeros(h.shape, dtype=np.int8)
        for i, (t, n) in enumerate(cells):
            if bits >> i & 1:
                mask[t, n] = 1
        if np.any(mask.sum(axis=1) > kappa2):
            continue
        if cap_mode == "count":
            if np.any(mask.sum(axis=0) > kappa1):
                continue
        elif np.any((h * mask).sum(axis=0) > kappa1 + _PRUNE_EPS):
            continue
        value = float(h[mask.astype(bool)].sum())
        if value > best:
            best, best_mask = value, mask
    return best_mask, {"method": "exhaustive", "nodes": 1 << len(cells)}


def _repair_rows(
    h: np.ndarray, mask: np.ndarray, kappa1: float, kappa2: int, cap_mode: str
) -> np.ndarray:
    """Give every empty row one entry where kappa1 slack permits (free: H >= 0)."""
    mask = mask.copy()
    col_used = (
        mask.sum(axis=0).astype(float) if cap_mode == "count" else (h * mask).sum(axis=0)
    )
    for t in range(h.shape[0]):
        if mask[t].sum() > 0 or kappa2 < 1:
            continue
        order = np.argsort(-h[t], kind="stable")
        for n in order:
            if _col_feasible(col_used[n], float(h[t, n]), kappa1, cap_mode):
                mask[t, n] = 1
                col_used[n] += _col_usage(float(h[t, n]), cap_mode)
                break
    return mask


def solve_assignment(
    task_map: TaskMapMatrix,
    kappa1: float,
    kappa2: int,
    cap_mode: str = "count",
    method: str = "auto",
) -> AssignmentMask:
    """Maximize retained task-map mass under the kappa caps, per layer.

    Exact (exhaustive then branch-and-bound) up to EXACT_CELL_LIMIT cells;
    greedy beyond, with the relaxation bound reported so the gap is visible.
    """
    if cap_mode not in ("count", "weighted"):
        raise ConfigError(f"unknown cap_mode '{cap_mode}'")
    min_k1 = 1 if cap_mode == "count" else 0
    if kappa1 <= min_k1 - 1 or kappa2 < 1 or kappa1 <= 0:
        raise ConfigError("kappa caps must be positive (kappa1 >= 1 in count mode)")
    if method not in ("auto", "exact", "greedy"):
        raise ConfigError(f"unknown method '{method}'")
    per_layer: list[np.ndarray] = []
    infos: list[dict] = []
    for h in task_map.per_layer:
        cells_n = h.size
        use = method
        if use == "auto":
            use = "exact" if cells_n <= EXACT_CELL_LIMIT else "greedy"
        if use == "exact" and cells_n > EXACT_CELL_LIMIT:
            raise ConfigError(f"instance with {cells_n} cells exceeds the exact regime")
        if use == "exact":
            if cells_n <= EXHAUSTIVE_CELL_LIMIT:
                mask, info = _solve_exhaustive(h, kappa1, kappa2, cap_mode)
            else:
                mask, info = _solve_bnb(h, kappa1, kappa2, cap_mode)
        else:
            cells = sorted(
                ((float(h[t, n]), t, n) for t in range(h.shape[0]) for n in range(h.shape[1])),
                key=lambda c: (-c[0], c[1], c[2]),
            )
            mask = _greedy_assign(cells, h.shape, kappa1, kappa2, cap_mode)
            ub = _relaxed_bound(
                cells, 0, np.zeros(h.shape[0]), np.zeros(h.shape[1]), kappa1, kappa2, cap_mode
            )
            info = {"method": "greedy", "upper_bound": ub}
        mask = _repair_rows(h, mask, kappa1, kappa2, cap_mode)
        info["objective"] = float(h[mask.astype(bool)].sum())
        per_layer.append(mask)
        infos.append(info)
    return AssignmentMask(per_layer, kappa1, kappa2, cap_mode, infos)


def build_target_mapping(task_map: TaskMapMatrix, mask: AssignmentMask) -> TargetMapping:
    """P = H * M with renormalized rows; all-zero rows are repaired by
    force-selecting the sub-task's best module, exceeding kappa1 by at most 1."""
    per_layer: list[np.ndarray] = []
    rows: list[np.ndarray] = []
    masks: list[np.ndarray] = []
    repairs: list[tuple[int, int]] = []
    for l, (h, m) in enumerate(zip(task_map.per_layer, mask.per_layer)):
        m = m.copy()
        p = h * m
        if mask.cap_mode == "count":
            col_used = m.sum(axis=0).astype(float)
            cap = mask.kappa1 + 1
        else:
            col_used = (h * m).sum(axis=0)
            cap = None  # weighted cap: allow one overflow pick regardless
        for t in range(h.shape[0]):
            if p[t].sum() > 0:
                continue
            order = np.argsort(-h[t], kind="stable")
            pick = None
            if cap is not None:
                for n in order:
                    if col_used[n] + 1 <= cap:
                        pick = n
                        break
            if pick is None:
                pick = int(order[0])
            m[t, pick] = 1
            col_used[pick] += 1 if cap is not None else float(h[t, pick])
            p[t, pick] = h[t, pick] if h[t, pick] > 0 else 1.0
            repairs.append((l, t))
        denom = p.sum(axis=1, keepdims=True)
        rows.append(p / denom)
        per_layer.append(p)
        masks.append(m)
    return TargetMapping(per_layer, rows, masks, repairs)


def finetune_enhance(
    model: ModularModel,
    selector: UnifiedSelector,
    mapping: TargetMapping,
    data: Dataset,
    lam: float,
    epochs: int,
    rng: np.random.Generator,
    lr: float = 0.001,
    batch_size: int = 16,
    quiet: bool = True,
) -> tuple[ModularModel, UnifiedSelector, list[dict]]:
    """Joint fine-tune under CE + lambda * KL(g_label || gates).

    Each sample's g_label is the renormalized target-mapping row of its
    sub-task. The final record reports the post-tune task map and the share
    of each sub-task's gate mass that falls on its assigned modules.
    """
    if data.subtask_ids is None:
        raise DataError("fine-tuning needs sub-task annotated data")
    sgd = SgdConfig(learning_rate=lr, batch_size=batch_size)
    params = model.parameters() + selector.parameters()
    log: list[dict] = []
    for epoch in range(epochs):
        ce_sum = kl_sum = 0.0
        n_batches = 0
        for idx in minibatches(len(data), batch_size, rng):
            tids = data.subtask_ids[idx]
            targets = [rows[tids] for rows in mapping.rows]
            tape = GradTape()
            # guided fine-tuning is exploration-free: no selection noise
            logits, dec = model_forward(
                model, selector, data.x[idx], "train", tape, noise_scale=0.0
            )
            ce = cross_entropy(logits, data.y[idx], tape)
            kl = kl_guidance_loss(dec, targets, tape)
            loss = add(ce, scale(kl, lam, tape), tape)
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError(
                    f"fine-tune loss non-finite at epoch {epoch}, batch {n_batches}"
                )
            grads = backward(tape, loss)
            sgd_step(params, grads, sgd)
            ce_sum += ce.item()
            kl_sum += kl.item()
            n_batches += 1
        record = {
            "epoch": epoch,
            "loss_ce": ce_sum / n_batches,
            "loss_kl": kl_sum / n_batches,
            "accuracy": accuracy(model, selector, data.x, data.y),
        }
        log.append(record)
        if not quiet:
            print(
                f"finetune epoch {epoch}: ce={record['loss_ce']:.4f} "
                f"kl={record['loss_kl']:.4f} acc={record['accuracy']:.4f}"
            )
    post = build_task_map(selector, data)
    alignment = [
        (h * m).sum(axis=1).tolist() for h, m in zip(post.per_layer, mapping.masks)
    ]
    log.append(
        {
            "final": True,
            "post_task_map": [h.tolist() for h in post.per_layer],
            "subtask_alignment": alignment,
        }
    )
    return model, selector, log
