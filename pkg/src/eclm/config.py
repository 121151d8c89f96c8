"""Scenario configuration: JSON document -> validated dataclasses.

Unknown keys are rejected so typos fail loudly. Defaults describe the
standard desk-scale synthetic scenario; every field can be overridden from
the config file.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError


def _from_dict(cls, d: dict, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name in d:
            value = d[f.name]
            if isinstance(value, list) and isinstance(f.default, tuple):
                value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
            kwargs[f.name] = value
    return cls(**kwargs)


@dataclass(frozen=True)
class DataSection:
    kind: str = "synthetic"  # "synthetic" | "csv"
    classes: int = 8
    input_dim: int = 32
    clusters_per_class: int = 2
    samples_per_class: int = 550
    sigma: float = 1.0
    mean_scale: float = 1.0
    margin: float = 4.0
    proxy_fraction: float = 0.3
    shift_pool_fraction: float = 0.5
    eval_per_class: int = 125
    eval_fraction: float = 0.2  # csv only
    csv_path: str | None = None
    label_column: int = -1
    subtasks: tuple = ()  # tuple of class tuples; () -> consecutive pairs

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic", "csv"):
            raise ConfigError(f"data.kind '{self.kind}' is not synthetic|csv")
        if self.kind == "csv" and not self.csv_path:
            raise ConfigError("data.kind=csv requires data.csv_path")
        if not 0.0 < self.proxy_fraction < 1.0:
            raise ConfigError("proxy_fraction must lie in (0, 1)")
        if not 0.0 <= self.shift_pool_fraction < 1.0:
            raise ConfigError("shift_pool_fraction must lie in [0, 1)")

    def subtask_groups(self, n_classes: int) -> list[tuple[int, ...]]:
        if self.subtasks:
            return [tuple(int(c) for c in g) for g in self.subtasks]
        if n_classes % 2 == 0:
            return [(c, c + 1) for c in range(0, n_classes, 2)]
        return [(c,) for c in range(n_classes)]


@dataclass(frozen=True)
class FleetSection:
    num_devices: int = 20
    participation_fraction: float = 0.25
    classes_per_device: int = 2
    size_range: tuple = (50, 150)
    resource_tiers: tuple = (0.2, 0.5, 1.0)

    def __post_init__(self) -> None:
        if not 0.0 < self.participation_fraction <= 1.0:
            raise ConfigError("participation_fraction must lie in (0, 1]")
        if self.num_devices < 1:
            raise ConfigError("num_devices must be >= 1")


@dataclass(frozen=True)
class ModelSection:
    front_dims: tuple = (64,)
    module_layers: int = 2
    layer_width: int = 64
    layer_hidden: int = 64
    modules_per_layer: int = 16
    shrink_fractions: tuple = (0.25, 0.5)
    include_residual: bool = True
    top_k: int = 2
    selector_embed_dims: tuple = (32,)


@dataclass(frozen=True)
class TrainingSection:
    lr: float = 0.001
    batch_size: int = 16
    local_epochs: int = 3
    pretrain_epochs: int = 60
    pretrain_lr: float = 0.01
    pretrain_batch: int = 32
    finetune_epochs: int = 10
    finetune_lr: float | None = None  # None -> pretrain_lr
    lambda_balance: float = 0.1
    lambda_guidance: float = 1.0
    noise_scale: float = 1.0
    kappa1: int | None = None  # None -> ceil(T * kappa2 / N)
    kappa2: int | None = None  # None -> max(1, round(N / 4))
    cap_mode: str = "count"
    upload_every: int = 1
    aggregate_min_updates: int | None = None  # None -> all of the round


@dataclass(frozen=True)
class DynamicsSection:
    shift_fraction: float = 0.5
    shift_period: int = 10
    fluctuation_range: tuple = (1.0, 1.0)
    class_drift: bool = False


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    rounds: int = 60
    data: DataSection = field(default_factory=DataSection)
    fleet: FleetSection = field(default_factory=FleetSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    dynamics: DynamicsSection = field(default_factory=DynamicsSection)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be an object")
        known = {"seed", "rounds", "data", "fleet", "model", "training", "dynamics"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"config: unknown keys {sorted(unknown)}")
        return cls(
            seed=int(d.get("seed", 0)),
            rounds=int(d.get("rounds", 60)),
            data=_from_dict(DataSection, d.get("data", {}), "data"),
            fleet=_from_dict(FleetSection, d.get("fleet", {}), "fleet"),
            model=_from_dict(ModelSection, d.get("model", {}), "model"),
            training=_from_dict(TrainingSection, d.get("training", {}), "training"),
            dynamics=_from_dict(DynamicsSection, d.get("dynamics", {}), "dynamics"),
        )

    @classmethod
    def from_file(cls, path: str) -> "ScenarioConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(doc)

    def with_seed(self, seed: int) -> "ScenarioConfig":
        doc = self.to_dict()
        doc["seed"] = seed
        return ScenarioConfig.from_dict(doc)

    def to_dict(self) -> dict:
        doc = asdict(self)

        def clean(v):
            if isinstance(v, tuple):
                return [clean(x) for x in v]
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return v

        return clean(doc)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)
