"""End-to-end run engine: the offline cloud stage, the online collaborative
round loop (plus the no_adapt / local_only / fedavg baselines under identical
environment events), byte-exact communication accounting, and artifact
inspection.

Every strategy run with the same (config, seed) sees identical partitions,
participation draws, shift events, and budget fluctuations because those are
drawn from purpose-keyed streams that never depend on the strategy. Metrics
and checkpoints contain no wall-clock values; timing goes to a separate
timing.jsonl so reruns are byte-identical.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregation import (
    DeviceUpdate,
    aggregate,
    divergence_metric,
    update_from_submodel,
)
from .config import ScenarioConfig
from .data import Dataset
from .derivation import (
    ImportanceVector,
    ResourceBudget,
    derive_submodel,
    importance_profile,
)
from .environment import (
    DeviceState,
    SamplePool,
    SyntheticTaskSpec,
    fluctuate,
    ingest_csv,
    local_train,
    partition_noniid,
    sample_resources,
    shift_data,
    standardize_features,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    InfeasibleBudgetError,
)
from .modular import (
    ModelShape,
    ModularModel,
    ResourceCost,
    SubModelSpec,
    accuracy,
    cost_of,
    decode_model_bundle,
    design_space_bits,
    encode_model_bundle,
    make_model_selector,
    materialize_submodel,
    modularize,
    shared_cost,
)
from .nn.layers import SgdConfig
from .nn.serialize import MAGIC, decode_bundle, encode_bundle
from .nn.tensor import Tensor
from .rng import stream
from .selector import UnifiedSelector, select
from .training import (
    PretrainConfig,
    annotate_subtasks,
    build_target_mapping,
    build_task_map,
    finetune_enhance,
    make_subtasks,
    pretrain,
    solve_assignment,
    validate_subtasks,
)

STRATEGIES = ("eclm", "no_adapt", "local_only", "fedavg")

CHECKPOINT_NAME = "checkpoint.eclm"
FINAL_NAME = "final.eclm"


@dataclass
class RoundMetrics:
    round: int
    global_acc: float
    local_acc_mean: float | None
    local_acc_std: float | None
    comm_down_bytes: int
    comm_up_bytes: int
    divergence: float | None
    divergence_per_group: dict
    load_hist: list[list[float]]
    wall_time: float = 0.0

    def to_row(self) -> dict:
        # wall_time deliberately excluded: metrics.jsonl must be reproducible
        return {
            "round": self.round,
            "global_acc": self.global_acc,
            "local_acc_mean": self.local_acc_mean,
            "local_acc_std": self.local_acc_std,
            "comm_down_bytes": self.comm_down_bytes,
            "comm_up_bytes": self.comm_up_bytes,
            "divergence": self.divergence,
            "divergence_per_group": self.divergence_per_group,
            "load_hist": self.load_hist,
        }


def _dump_row(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


class RunWriter:
    """Append-only jsonl writers for metrics, events, and timing."""

    def __init__(self, out_dir: str | Path):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._metrics = open(self.dir / "metrics.jsonl", "w")
        self._events = open(self.dir / "events.jsonl", "w")
        self._timing = open(self.dir / "timing.jsonl", "w")

    def metric(self, row: dict) -> None:
        self._metrics.write(_dump_row(row) + "\n")

    def event(self, row: dict) -> None:
        self._events.write(_dump_row(row) + "\n")

    def timing(self, row: dict) -> None:
        self._timing.write(_dump_row(row) + "\n")

    def close(self) -> None:
        for fh in (self._metrics, self._events, self._timing):
            fh.close()


# ---------------------------------------------------------------------------
# data and fleet assembly


@dataclass
class Environment:
    proxy: Dataset
    eval_data: Dataset
    devices: list[DeviceState]
    shift_pool: SamplePool
    subtask_groups: list[tuple[int, ...]]
    n_classes: int
    replacement_logged: bool


def model_shape_from(cfg: ScenarioConfig, input_dim: int, n_classes: int) -> ModelShape:
    m = cfg.model
    return ModelShape(
        input_dim=input_dim,
        num_classes=n_classes,
        front_dims=tuple(m.front_dims),
        num_module_layers=m.module_layers,
        layer_width=m.layer_width,
        layer_hidden=m.layer_hidden,
        modules_per_layer=m.modules_per_layer,
        shrink_fractions=tuple(m.shrink_fractions),
        include_residual=m.include_residual,
    )


def _split_counts(total: int, fraction: float) -> tuple[int, int]:
    first = int(round(total * fraction))
    return first, total - first


def build_datasets(cfg: ScenarioConfig) -> dict:
    """Proxy / edge-initial / shift-pool / eval splits per the configuration."""
    d = cfg.data
    seed = cfg.seed
    if d.kind == "synthetic":
        spec = SyntheticTaskSpec(
            n_classes=d.classes,
            input_dim=d.input_dim,
            clusters_per_class=d.clusters_per_class,
            sigma=d.sigma,
            mean_scale=d.mean_scale,
            margin=d.margin,
        )
        means = spec.cluster_means(stream(seed, "task-means"))
        n_proxy, n_edge = _split_counts(d.samples_per_class, d.proxy_fraction)
        n_shift, n_init = _split_counts(n_edge, d.shift_pool_fraction)
        proxy = spec.sample(means, n_proxy, stream(seed, "proxy"))
        edge_init = spec.sample(means, n_init, stream(seed, "edge-init"))
        shift_pool = spec.sample(means, n_shift, stream(seed, "edge-shift"))
        eval_data = spec.sample(means, d.eval_per_class, stream(seed, "eval"))
        n_classes = d.classes
    else:
        raw, meta = ingest_csv(d.csv_path, d.label_column)
        n_classes = meta["n_classes"]
        rng = stream(seed, "csv-split")
        order = rng.permutation(len(raw))
        n_eval = int(round(len(raw) * d.eval_fraction))
        eval_idx, rest_idx = order[:n_eval], order[n_eval:]
        rest = raw.take(rest_idx)
        n_proxy = int(round(len(rest) * d.proxy_fraction))
        proxy_idx, edge_idx = np.arange(n_proxy), np.arange(n_proxy, len(rest))
        edge = rest.take(edge_idx)
        n_shift = int(round(len(edge) * d.shift_pool_fraction))
        (train_std, eval_std) = standardize_features(rest, raw.take(eval_idx))[0]
        proxy = train_std.take(proxy_idx)
        edge_std = train_std.take(edge_idx)
        edge_init = edge_std.take(np.arange(n_shift, len(edge_std)))
        shift_pool = edge_std.take(np.arange(n_shift))
        eval_data = eval_std
    groups = d.subtask_groups(n_classes)
    subtasks = make_subtasks([list(g) for g in groups])
    validate_subtasks(subtasks, n_classes)
    proxy = annotate_subtasks(proxy, subtasks, n_classes)
    return {
        "proxy": proxy,
        "edge_init": edge_init,
        "shift_pool": shift_pool,
        "eval": eval_data,
        "groups": groups,
        "n_classes": n_classes,
        "subtasks": subtasks,
    }


def forced_min_cost(model: ModularModel, selector: UnifiedSelector) -> ResourceCost:
    """Worst-case smallest sub-model: shared parts + each layer's priciest module."""
    total = shared_cost(model, selector)
    for ml in model.module_layers:
        worst = max(
            (m.cost for m in ml.modules),
            key=lambda c: (c.comm_bytes, c.compute_macs, c.mem_bytes),
        )
        total = total + worst
    return total


def build_environment(
    cfg: ScenarioConfig, model: ModularModel, selector: UnifiedSelector
) -> Environment:
    data = build_datasets(cfg)
    seed = cfg.seed
    pool = SamplePool(data["edge_init"], stream(seed, "device-pool"))
    parts = partition_noniid(
        pool,
        cfg.fleet.num_devices,
        cfg.fleet.classes_per_device,
        tuple(cfg.fleet.size_range),
        stream(seed, "partition"),
        subtask_groups=data["groups"],
    )
    full = cost_of(model, selector)
    budgets = sample_resources(
        full,
        list(cfg.fleet.resource_tiers),
        cfg.fleet.num_devices,
        stream(seed, "resources"),
        forced_min=forced_min_cost(model, selector),
    )
    devices = []
    for d, (classes, tid, local) in enumerate(parts):
        tier, budget = budgets[d]
        devices.append(
            DeviceState(
                device_id=d,
                data=local,
                classes=classes,
                subtask_id=tid,
                base_budget=budget,
                budget=budget,
                tier=tier,
            )
        )
    shift_pool = SamplePool(data["shift_pool"], stream(seed, "shift-pool"))
    return Environment(
        proxy=data["proxy"],
        eval_data=data["eval"],
        devices=devices,
        shift_pool=shift_pool,
        subtask_groups=data["groups"],
        n_classes=data["n_classes"],
        replacement_logged=pool.replacement_used,
    )


def resolve_caps(cfg: ScenarioConfig, t_count: int) -> tuple[int, int]:
    n = cfg.model.modules_per_layer
    kappa2 = cfg.training.kappa2 or max(1, round(n / 4))
    kappa1 = cfg.training.kappa1 or max(1, math.ceil(t_count * kappa2 / n))
    return kappa1, kappa2


# ---------------------------------------------------------------------------
# offline stage


def run_offline(
    cfg: ScenarioConfig,
    out_dir: str | Path,
    skip_enhance: bool = False,
    quiet: bool = True,
) -> Path:
    """Modularize, pretrain, map sub-tasks, assign, fine-tune, checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    data = build_datasets(cfg)
    proxy = data["proxy"]
    shape = model_shape_from(cfg, proxy.x.shape[1], data["n_classes"])
    model = modularize(shape, cfg.seed)
    selector = make_model_selector(
        shape, tuple(cfg.model.selector_embed_dims), cfg.model.top_k, cfg.seed,
        noise_scale=cfg.training.noise_scale,
    )
    pre_cfg = PretrainConfig(
        epochs=cfg.training.pretrain_epochs,
        lambda_balance=cfg.training.lambda_balance,
        lr=cfg.training.pretrain_lr,
        batch_size=cfg.training.pretrain_batch,
        noise_scale=cfg.training.noise_scale,
    )
    _, _, pre_log = pretrain(model, selector, proxy, pre_cfg, stream(cfg.seed, "pretrain"), quiet)
    with open(out / "pretrain_log.jsonl", "w") as fh:
        for rec in pre_log:
            fh.write(_dump_row(rec) + "\n")
    task_map = build_task_map(selector, proxy)
    _write_matrix_csvs(out, "H", task_map.per_layer)
    if not skip_enhance:
        kappa1, kappa2 = resolve_caps(cfg, len(data["groups"]))
        mask = solve_assignment(task_map, kappa1, kappa2, cfg.training.cap_mode)
        mapping = build_target_mapping(task_map, mask)
        _write_matrix_csvs(out, "M", [m.astype(float) for m in mapping.masks])
        _write_matrix_csvs(out, "P", mapping.per_layer)
        ft_lr = cfg.training.finetune_lr or cfg.training.pretrain_lr
        _, _, ft_log = finetune_enhance(
            model, selector, mapping, proxy,
            lam=cfg.training.lambda_guidance,
            epochs=cfg.training.finetune_epochs,
            rng=stream(cfg.seed, "finetune"),
            lr=ft_lr,
            batch_size=cfg.training.pretrain_batch,
            quiet=quiet,
        )
        with open(out / "finetune_log.jsonl", "w") as fh:
            for rec in ft_log:
                fh.write(_dump_row(rec) + "\n")
    model.version = 0
    blob = encode_model_bundle(model, selector, {"scenario": cfg.to_dict(), "stage": "offline"})
    (out / CHECKPOINT_NAME).write_bytes(blob)
    (out / "config_resolved.json").write_text(cfg.to_json() + "\n")
    if not quiet:
        print(f"offline stage done in {time.perf_counter() - t0:.1f}s -> {out}")
    return out / CHECKPOINT_NAME


def _write_matrix_csvs(out: Path, name: str, matrices: list[np.ndarray]) -> None:
    for l, mat in enumerate(matrices):
        lines = [",".join(repr(float(v)) for v in row) for row in mat]
        (out / f"{name}_layer{l}.csv").write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ModularModel, UnifiedSelector, dict]:
    p = Path(path)
    if p.is_dir():
        p = p / CHECKPOINT_NAME
    if not p.exists():
        raise CheckpointError(f"no checkpoint at {p}")
    return decode_model_bundle(p.read_bytes())


# ---------------------------------------------------------------------------
# online stage


def encode_update_payload(update: DeviceUpdate) -> bytes:
    arrays = [(name, update.arrays[name]) for name in sorted(update.arrays)]
    arrays += [(f"imp.{l}", v) for l, v in enumerate(update.importance.per_layer)]
    meta = {
        "device_id": update.device_id,
        "version": update.version,
        "sample_count": update.sample_count,
        "spec": json.loads(update.spec.to_json()),
    }
    return encode_bundle(meta, arrays)


def account_communication(events: list[dict]) -> tuple[int, int]:
    """Replay an event stream into cumulative (down, up) byte counters."""
    down = up = 0
    for e in events:
        if e.get("type") == "download":
            down += int(e["bytes"])
        elif e.get("type") == "upload":
            up += int(e["bytes"])
    return down, up


def _eval_load_hist(
    selector: UnifiedSelector, eval_data: Dataset, batch: int = 256
) -> list[list[float]]:
    sums = [np.zeros(h.out_dim) for h in selector.heads]
    for s in range(0, len(eval_data), batch):
        dec = select(selector, Tensor(eval_data.x[s : s + batch]), "eval")
        for l, g in enumerate(dec.gates):
            sums[l] += g.sum(axis=0)
    return [list(v / len(eval_data)) for v in sums]


def _spec_within_budget(
    model: ModularModel, selector: UnifiedSelector, spec: SubModelSpec, budget: ResourceBudget
) -> bool:
    c = cost_of(model, selector, spec)
    return (
        c.comm_bytes <= budget.comm_bytes
        and c.compute_macs <= budget.compute_macs
        and c.mem_bytes <= budget.mem_bytes
    )


def run_online(
    cfg: ScenarioConfig,
    checkpoint: str | Path,
    strategy: str,
    out_dir: str | Path,
    quiet: bool = True,
) -> list[RoundMetrics]:
    """Drive the per-round loop for one strategy and write its artifacts."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy '{strategy}'")
    model, selector, extra = load_checkpoint(checkpoint)
    env_probe = build_datasets(cfg)
    expected_shape = model_shape_from(cfg, env_probe["proxy"].x.shape[1], env_probe["n_classes"])
    if model.shape != expected_shape:
        raise CheckpointError("checkpoint model shape does not match the config")
    env = build_environment(cfg, model, selector)
    writer = RunWriter(out_dir)
    try:
        metrics = _round_loop(cfg, model, selector, env, strategy, writer, quiet)
    finally:
        writer.close()
    return metrics


def run_baseline(
    cfg: ScenarioConfig,
    checkpoint: str | Path,
    which: str,
    out_dir: str | Path,
    quiet: bool = True,
) -> list[RoundMetrics]:
    if which not in ("no_adapt", "local_only", "fedavg"):
        raise ConfigError(f"'{which}' is not a baseline strategy")
    return run_online(cfg, checkpoint, which, out_dir, quiet)


def _round_loop(
    cfg: ScenarioConfig,
    model: ModularModel,
    selector: UnifiedSelector,
    env: Environment,
    strategy: str,
    writer: RunWriter,
    quiet: bool,
) -> list[RoundMetrics]:
    seed = cfg.seed
    sgd = SgdConfig(learning_rate=cfg.training.lr, batch_size=cfg.training.batch_size)
    fluct = tuple(cfg.dynamics.fluctuation_range)
    fluct_active = fluct != (1.0, 1.0)
    frozen_acc = accuracy(model, selector, env.eval_data.x, env.eval_data.y)
    frozen_hist = _eval_load_hist(selector, env.eval_data)
    full_spec = SubModelSpec(
        layers=tuple(tuple(ml.module_indices()) for ml in model.module_layers)
    )
    uniform_importance = ImportanceVector(
        [np.full(ml.n_modules, 1.0 / ml.n_modules) for ml in model.module_layers]
    )
    comm_down = comm_up = 0
    metrics_out: list[RoundMetrics] = []
    pending_updates: list[DeviceUpdate] = []
    n_part = math.ceil(cfg.fleet.participation_fraction * cfg.fleet.num_devices)

    for rnd in range(cfg.rounds):
        t_round = time.perf_counter()
        # 1. environment dynamics (strategy independent)
        if (
            cfg.dynamics.shift_period > 0
            and rnd > 0
            and rnd % cfg.dynamics.shift_period == 0
        ):
            for dev in env.devices:
                replaced = shift_data(
                    dev,
                    cfg.dynamics.shift_fraction,
                    env.shift_pool,
                    stream(seed, "shift", rnd, dev.device_id),
                    class_drift=cfg.dynamics.class_drift,
                )
                writer.event(
                    {"type": "shift", "round": rnd, "device": dev.device_id, "replaced": replaced}
                )
        if fluct_active:
            for dev in env.devices:
                dev.budget = fluctuate(
                    dev.base_budget, fluct, stream(seed, "fluct", rnd, dev.device_id)
                )
                writer.event(
                    {
                        "type": "fluctuate",
                        "round": rnd,
                        "device": dev.device_id,
                        "compute_macs": dev.budget.compute_macs,
                        "mem_bytes": dev.budget.mem_bytes,
                    }
                )
        participants = sorted(
            int(d)
            for d in stream(seed, "participate", rnd).choice(
                cfg.fleet.num_devices, size=n_part, replace=False
            )
        )
        writer.event({"type": "participate", "round": rnd, "devices": participants})

        # 2. device work
        local_accs: list[float] = []
        round_updates: list[DeviceUpdate] = []
        for did in participants:
            dev = env.devices[did]
            if strategy == "no_adapt":
                local_accs.append(accuracy(model, selector, dev.data.x, dev.data.y))
                continue
            if strategy == "fedavg":
                imp = uniform_importance
                spec = full_spec
                sub = materialize_submodel(model, spec)
                sub.spec = None  # full model travels as-is
                sel_copy = selector.copy()
                down = len(encode_model_bundle(sub, sel_copy))
                comm_down += down
                writer.event({"type": "download", "round": rnd, "device": did, "bytes": down})
                update, m = local_train(
                    sub, sel_copy, dev.data, cfg.training.local_epochs, sgd,
                    stream(seed, "local", rnd, did), imp, did,
                )
            elif strategy == "eclm":
                imp = importance_profile(selector, dev.data)
                if (
                    dev.spec is None
                    or dev.stale_env
                    or not _spec_within_budget(model, selector, dev.spec, dev.budget)
                ):
                    try:
                        spec, info = derive_submodel(
                            model, selector, imp, dev.budget,
                            device_id=did, round_index=rnd,
                        )
                    except InfeasibleBudgetError as e:
                        writer.event(
                            {"type": "skip_device", "round": rnd, "device": did,
                             "reason": f"infeasible:{e.dimension}"}
                        )
                        continue
                    dev.spec = spec
                    dev.stale_env = False
                    derive_event = {"type": "derive", "round": rnd, "device": did,
                                    "spec": json.loads(spec.to_json()),
                                    "method": info["method"]}
                    if "gap_bound" in info:
                        derive_event["gap_bound"] = info["gap_bound"]
                    writer.event(derive_event)
                spec = dev.spec
                sub = materialize_submodel(model, spec)
                sel_copy = selector.copy()
                down = len(encode_model_bundle(sub, sel_copy)) + len(spec.to_json())
                comm_down += down
                writer.event({"type": "download", "round": rnd, "device": did, "bytes": down})
                update, m = local_train(
                    sub, sel_copy, dev.data, cfg.training.local_epochs, sgd,
                    stream(seed, "local", rnd, did), imp, did,
                )
            else:  # local_only
                update, m = _local_only_step(
                    cfg, model, selector, dev, rnd, sgd, writer,
                )
                if m is not None:
                    local_accs.append(m["post_accuracy"])
                comm_down += m.pop("_down", 0) if m else 0
                continue
            if update is None:
                writer.event(
                    {"type": "skip_device", "round": rnd, "device": did, "reason": "diverged"}
                )
                continue
            local_accs.append(m["post_accuracy"])
            if cfg.training.upload_every <= 1 or rnd % cfg.training.upload_every == 0:
                up = len(encode_update_payload(update))
                comm_up += up
                writer.event({"type": "upload", "round": rnd, "device": did, "bytes": up})
                round_updates.append(update)

        # 3. aggregation
        divergence: dict = {"overall": None, "per_group": {}}
        if strategy in ("eclm", "fedavg") and round_updates:
            pending_updates.extend(round_updates)
            threshold = cfg.training.aggregate_min_updates or len(round_updates)
            if len(pending_updates) >= threshold:
                divergence = divergence_metric(model, selector, pending_updates)
                mode = "importance" if strategy == "eclm" else "samples"
                model, selector, report = aggregate(
                    model, selector, pending_updates, mode=mode
                )
                writer.event(
                    {
                        "type": "aggregate",
                        "round": rnd,
                        "updates": len(pending_updates),
                        "rejected_stale": report.rejected_stale,
                        "untouched": len(report.untouched),
                        "version": model.version,
                    }
                )
                pending_updates = []
                for dev in env.devices:
                    dev.stale_env = True  # cloud moved; cached specs may be re-derived

        # 4. metrics
        if strategy in ("eclm", "fedavg"):
            global_acc = accuracy(model, selector, env.eval_data.x, env.eval_data.y)
            hist = _eval_load_hist(selector, env.eval_data)
        else:
            global_acc = frozen_acc
            hist = frozen_hist
        rm = RoundMetrics(
            round=rnd,
            global_acc=global_acc,
            local_acc_mean=float(np.mean(local_accs)) if local_accs else None,
            local_acc_std=float(np.std(local_accs)) if local_accs else None,
            comm_down_bytes=comm_down,
            comm_up_bytes=comm_up,
            divergence=divergence["overall"],
            divergence_per_group=divergence["per_group"],
            load_hist=hist,
            wall_time=time.perf_counter() - t_round,
        )
        writer.metric(rm.to_row())
        writer.timing({"round": rnd, "wall_time": rm.wall_time})
        metrics_out.append(rm)
        if not quiet:
            div = f"{rm.divergence:.2e}" if rm.divergence is not None else "-"
            print(
                f"[{strategy}] round {rnd}: global={rm.global_acc:.4f} "
                f"local={rm.local_acc_mean if rm.local_acc_mean is None else round(rm.local_acc_mean, 4)} "
                f"div={div}"
            )

    blob = encode_model_bundle(
        model, selector, {"scenario": cfg.to_dict(), "stage": f"online:{strategy}"}
    )
    (writer.dir / FINAL_NAME).write_bytes(blob)
    return metrics_out


def _local_only_step(
    cfg: ScenarioConfig,
    base_model: ModularModel,
    base_selector: UnifiedSelector,
    dev: DeviceState,
    rnd: int,
    sgd: SgdConfig,
    writer: RunWriter,
):
    """local_only: one download ever, then personal fine-tuning with no uploads."""
    seed = cfg.seed
    if dev.personal_arrays is None:
        imp = importance_profile(base_selector, dev.data)
        try:
            spec, _ = derive_submodel(
                base_model, base_selector, imp, dev.budget,
                device_id=dev.device_id, round_index=rnd,
            )
        except InfeasibleBudgetError as e:
            writer.event(
                {"type": "skip_device", "round": rnd, "device": dev.device_id,
                 "reason": f"infeasible:{e.dimension}"}
            )
            return None, None
        sub = materialize_submodel(base_model, spec)
        sel = base_selector.copy()
        down = len(encode_model_bundle(sub, sel)) + len(spec.to_json())
        writer.event(
            {"type": "download", "round": rnd, "device": dev.device_id, "bytes": down}
        )
        dev.personal_arrays = {"sub": sub, "sel": sel}
        dev.spec = spec
        extra_down = down
    else:
        sub = dev.personal_arrays["sub"]
        sel = dev.personal_arrays["sel"]
        extra_down = 0
    imp = importance_profile(sel, dev.data)
    update, m = local_train(
        sub, sel, dev.data, cfg.training.local_epochs, sgd,
        stream(seed, "local", rnd, dev.device_id), imp, dev.device_id,
    )
    if m is not None:
        m["_down"] = extra_down
    return update, m


# ---------------------------------------------------------------------------
# inspection


def inspect(path: str | Path) -> str:
    """Human-readable report for a checkpoint, matrix CSV, jsonl, or spec JSON."""
    p = Path(path)
    if p.is_dir():
        candidates = [p / CHECKPOINT_NAME, p / FINAL_NAME]
        for c in candidates:
            if c.exists():
                p = c
                break
        else:
            raise DataError(f"{path}: no inspectable artifact in directory")
    if not p.exists():
        raise DataError(f"{path}: no such file")
    blob = p.read_bytes()
    if blob.startswith(MAGIC):
        return _inspect_checkpoint(blob)
    if p.suffix == ".csv":
        return _inspect_csv(p)
    if p.suffix == ".jsonl":
        return _inspect_jsonl(p)
    if p.suffix == ".json":
        doc = json.loads(blob.decode("utf-8"))
        return json.dumps(doc, indent=2, sort_keys=True)
    raise DataError(f"{path}: unknown artifact format")


def _inspect_checkpoint(blob: bytes) -> str:
    model, selector, extra = decode_model_bundle(blob)
    bits = design_space_bits(model)
    lines = [
        "modular model checkpoint",
        f"  version: {model.version}",
        f"  input dim: {model.shape.input_dim}  classes: {model.shape.num_classes}",
        f"  front blocks: {[l.out_dim for l in model.front]}",
        f"  module layers: {model.n_module_layers} "
        f"(width {model.shape.layer_width}, hidden {model.shape.layer_hidden})",
    ]
    for ml in model.module_layers:
        kinds = ", ".join(
            f"{m.module_index}:{m.kind}"
            + (f"({m.width_fraction})" if m.width_fraction else "")
            for m in ml.modules
        )
        lines.append(f"    layer {ml.index}: {ml.n_modules} modules [{kinds}]")
    sel_params = sum(p.data.size for p in selector.parameters())
    lines += [
        f"  selector: embed dims {[l.out_dim for l in selector.embed]}, "
        f"k={selector.k}, params {sel_params}",
        f"  model params: {model.n_params()}",
        f"  design space: {bits} bits (~{2.0 ** bits:.2e} sub-models)",
    ]
    if model.spec is not None:
        lines.append(f"  sub-model spec: {model.spec.to_json()}")
    if extra.get("stage"):
        lines.append(f"  stage: {extra['stage']}")
    return "\n".join(lines)


def _inspect_csv(p: Path) -> str:
    rows = [
        [float(v) for v in line.split(",")]
        for line in p.read_text().strip().splitlines()
    ]
    mat = np.array(rows)
    lines = [f"{p.name}: {mat.shape[0]} x {mat.shape[1]}"]
    for i, row in enumerate(mat):
        vals = " ".join(f"{v:.4f}" for v in row)
        lines.append(f"  row {i}: [{vals}]  sum={row.sum():.6f}")
    return "\n".join(lines)


def _inspect_jsonl(p: Path) -> str:
    rows = [json.loads(line) for line in p.read_text().splitlines() if line.strip()]
    if not rows:
        return f"{p.name}: empty"
    if "global_acc" in rows[0]:
        first, last = rows[0], rows[-1]
        divs = [r["divergence"] for r in rows if r.get("divergence") is not None]
        lines = [
            f"{p.name}: {len(rows)} rounds",
            f"  global acc: {first['global_acc']:.4f} -> {last['global_acc']:.4f}",
            f"  comm down/up: {last['comm_down_bytes']} / {last['comm_up_bytes']} bytes",
        ]
        if divs:
            lines.append(f"  median divergence: {float(np.median(divs)):.3e}")
        return "\n".join(lines)
    if "type" in rows[0]:
        counts: dict[str, int] = {}
        for r in rows:
            counts[r["type"]] = counts.get(r["type"], 0) + 1
        down, up = account_communication(rows)
        lines = [f"{p.name}: {len(rows)} events"]
        for k in sorted(counts):
            lines.append(f"  {k}: {counts[k]}")
        lines.append(f"  replayed comm down/up: {down} / {up} bytes")
        return "\n".join(lines)
    return f"{p.name}: {len(rows)} records"
