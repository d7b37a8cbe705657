"""Experiment configuration: nested dataclasses loaded from YAML with strict key checking."""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .losses import LossWeights
from .model import NetworkConfig

TASKS = ("synthetic", "cifar10-lt", "cifar100-lt", "array", "folder")
SCHEDULES = ("cosine", "step", "cosine_warm_restarts")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SCLSection:
    tau: float = 0.1


@dataclass(frozen=True)
class LDAMSection:
    max_m: float = 0.5
    s: float = 30.0
    loss: str = "ldam"  # "ldam" | "ce" (zero margins, same scaled cosine logits)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 5
    schedule: str = "cosine"
    step_milestones: tuple[int, ...] = (160, 180)
    step_factor: float = 0.1
    restart_period: int = 10
    t_th: int = 100
    loss_weights: LossWeights = field(default_factory=LossWeights)
    scl: SCLSection = field(default_factory=SCLSection)
    ldam: LDAMSection = field(default_factory=LDAMSection)
    seed: int = 0
    checkpoint_every: int = 0  # 0: only last/best
    augment: bool = False

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2")
        if not 0 <= self.t_th <= self.epochs:
            raise ConfigError(f"train.t_th={self.t_th} must lie in [0, epochs={self.epochs}]")
        ms = list(self.step_milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m >= self.epochs or m < 0 for m in ms):
            raise ConfigError("train.step_milestones must be strictly increasing and < epochs")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"train.schedule must be one of {SCHEDULES}")
        if self.warmup_epochs < 0 or self.restart_period < 1:
            raise ConfigError("train.warmup_epochs must be >= 0 and restart_period >= 1")
        if self.base_lr <= 0:
            raise ConfigError("train.base_lr must be > 0")
        if self.ldam.loss not in ("ldam", "ce"):
            raise ConfigError("train.ldam.loss must be 'ldam' or 'ce'")
        if self.scl.tau <= 0 or self.ldam.max_m <= 0 or self.ldam.s <= 0:
            raise ConfigError("tau, max_m and s must be > 0")

    def with_epochs(self, epochs: int) -> "TrainConfig":
        """Override the epoch count, pulling t_th and milestones inside the new range."""
        return dataclasses.replace(
            self,
            epochs=epochs,
            t_th=min(self.t_th, epochs),
            step_milestones=tuple(m for m in self.step_milestones if m < epochs),
        )


@dataclass(frozen=True)
class SyntheticSection:
    num_classes: int = 10
    feature_dim: int = 8
    class_separation: float = 3.0
    within_class_std: float = 1.0
    test_per_class: int = 100


@dataclass(frozen=True)
class DataSection:
    root: str | None = None  # cifar batches directory or class-folder root
    x_path: str | None = None
    y_path: str | None = None
    test_x_path: str | None = None
    test_y_path: str | None = None
    test_root: str | None = None
    manifest: str | None = None
    class_order: tuple[int, ...] | None = None
    split_seed: int = 0
    val_fraction: float = 0.0  # held out of the test split for GA fitness
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)


@dataclass(frozen=True)
class LongTailSection:
    n_max: int = 500
    beta: float = 100.0


@dataclass(frozen=True)
class RSGSection:
    partition_rule: str = "geometric_mean"
    rare_fraction: float = 0.5


@dataclass(frozen=True)
class GAConfig:
    population_size: int = 12
    generations: int = 8
    bounds: tuple[float, float] = (0.0, 10.0)
    mutation_std: float = 0.8
    crossover_rate: float = 0.7
    elitism_count: int = 2
    eval_epochs: int = 5
    fine_tune_lr: float = 0.01
    seed: int = 0
    pretrained_checkpoint: str | None = None
    surrogate: str | None = None  # "quadratic": planted optimum, no training
    surrogate_optimum: tuple[float, float] = (3.0, 1.0)
    top_k: int = 10

    def validate(self) -> None:
        if self.population_size < 2:
            raise ConfigError("ga.population_size must be >= 2")
        if not 1 <= self.elitism_count < self.population_size:
            raise ConfigError("ga.elitism_count must be in [1, population_size)")
        if self.generations < 0 or self.eval_epochs < 0:
            raise ConfigError("ga.generations and ga.eval_epochs must be >= 0")
        if not 0 <= self.crossover_rate <= 1 or self.mutation_std < 0:
            raise ConfigError("ga.crossover_rate must be in [0, 1] and mutation_std >= 0")
        if self.fine_tune_lr <= 0 or self.top_k < 1:
            raise ConfigError("ga.fine_tune_lr must be > 0 and ga.top_k >= 1")
        lo, hi = self.bounds
        if not lo < hi:
            raise ConfigError("ga.bounds must satisfy low < high")
        if self.surrogate not in (None, "quadratic"):
            raise ConfigError("ga.surrogate must be null or 'quadratic'")


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "synthetic"
    output_dir: str | None = None
    data: DataSection = field(default_factory=DataSection)
    longtail: LongTailSection = field(default_factory=LongTailSection)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    rsg: RSGSection = field(default_factory=RSGSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    ga: GAConfig = field(default_factory=GAConfig)

    def validate(self) -> "ExperimentConfig":
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        self.train.validate()
        self.ga.validate()
        if self.rsg.partition_rule not in ("geometric_mean", "fraction"):
            raise ConfigError("rsg.partition_rule must be 'geometric_mean' or 'fraction'")
        expected = self.expected_classes()
        if expected is not None and self.network.num_classes != expected:
            raise ConfigError(f"network.num_classes={self.network.num_classes} but task provides {expected} classes")
        if self.task == "synthetic" and self.network.backbone == "mlp" and \
                self.network.input_dim != self.data.synthetic.feature_dim:
            raise ConfigError("network.input_dim must equal data.synthetic.feature_dim")
        if self.task in ("cifar10-lt", "cifar100-lt", "folder") and not self.data.root:
            raise ConfigError(f"task {self.task} needs data.root")
        if self.task == "array" and not (self.data.x_path and self.data.y_path):
            raise ConfigError("task array needs data.x_path and data.y_path")
        if not 0 <= self.data.val_fraction < 1:
            raise ConfigError("data.val_fraction must be in [0, 1)")
        return self

    def expected_classes(self) -> int | None:
        return {"synthetic": self.data.synthetic.num_classes, "cifar10-lt": 10, "cifar100-lt": 100}.get(self.task)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if value is None:
        if tp is type(None) or type(None) in args:
            return None
        raise ConfigError(f"{path}: null not allowed")
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        elem = args[0] if args else object
        return tuple(_convert(elem, v, f"{path}[{i}]") for i, v in enumerate(value))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: dict | None, path: str = ""):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {unknown}")
    kwargs = {k: _convert(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text()) or {}
    return from_dict(ExperimentConfig, raw).validate()


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
