"""Experiment configuration: dataclasses, strict YAML loading, dotted overrides."""
from __future__ import annotations

import copy
import dataclasses
import math
import typing
from dataclasses import dataclass, field
from typing import List, Optional, Union

import yaml

METHODS = ("prunefl", "conventional", "oneshot", "iterative")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    kind: str = "mlp"  # mlp | cnn
    hidden: List[int] = field(default_factory=lambda: [256])
    # cnn only
    channels: List[int] = field(default_factory=lambda: [8])
    kernel_size: int = 3


@dataclass
class PartitionConfig:
    mode: str = "iid"  # iid | label_skew
    num_clients: int = 10
    labels_per_client: int = 2


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | idx
    classes: int = 10
    dims: int = 32
    n_train: int = 4000
    n_test: int = 2000
    separation: float = 4.0
    clusters_per_class: int = 1
    noise: float = 1.0
    # idx only
    images: Optional[str] = None
    labels: Optional[str] = None
    test_fraction: float = 0.2
    partition: PartitionConfig = field(default_factory=PartitionConfig)


@dataclass
class RoundsConfig:
    local_iters: int = 5
    batch_size: int = 20
    clients_per_round: Optional[int] = None
    reconfig_interval: int = 50


@dataclass
class SchedulesConfig:
    alpha_base: float = 0.3
    alpha_half_life: float = 10000.0
    density_limit: Optional[float] = None
    density_target: Optional[float] = None
    r_max: Optional[int] = None


@dataclass
class SgdSection:
    lr: float = 0.05
    momentum: float = 0.0
    lr_half_life: Optional[float] = None


@dataclass
class CostConfig:
    preset: Optional[str] = None
    c_seconds: float = 0.5
    bandwidth_Bps: Optional[float] = 1.0e5
    # one value for every layer, or one per parameterized layer
    t_per_layer: Union[float, List[float]] = 1.0e-4


@dataclass
class InitialPruningSection:
    enabled: bool = True
    max_iterations: int = 2000
    iters_per_reconfig: int = 5
    client: int = 0
    stable_tol: float = 0.10
    stable_count: int = 5


@dataclass
class ExperimentConfig:
    method: str = "prunefl"
    seed: int = 0
    rounds: int = 300
    eval_every: int = 1
    # rounds of retraining in the lottery-ticket check (default: ``rounds``)
    lottery_rounds: Optional[int] = None
    # target density for oneshot / iterative; taken from a prunefl summary
    # when ``matched_summary`` is set instead
    matched_density: Optional[float] = None
    matched_summary: Optional[str] = None
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    round: RoundsConfig = field(default_factory=RoundsConfig)
    schedules: SchedulesConfig = field(default_factory=SchedulesConfig)
    sgd: SgdSection = field(default_factory=SgdSection)
    cost: CostConfig = field(default_factory=CostConfig)
    initial_pruning: InitialPruningSection = field(default_factory=InitialPruningSection)
    out: str = "runs/experiment.csv"

    def validate(self) -> "ExperimentConfig":
        def need(ok, path, msg):
            if not ok:
                raise ConfigError(f"{path}: {msg}")

        need(self.method in METHODS, "method", f"must be one of {METHODS}")
        need(self.rounds >= 0, "rounds", "must be >= 0")
        need(self.eval_every >= 1, "eval_every", "must be >= 1")
        if self.lottery_rounds is not None:
            need(self.lottery_rounds >= 0, "lottery_rounds", "must be >= 0")
        need(self.model.kind in ("mlp", "cnn"), "model.kind", "must be mlp or cnn")
        need(all(h >= 1 for h in self.model.hidden), "model.hidden", "sizes must be >= 1")
        need(self.data.source in ("synthetic", "idx"), "data.source", "must be synthetic or idx")
        if self.data.source == "idx":
            need(self.data.images is not None, "data.images", "required for idx data")
            need(self.data.labels is not None, "data.labels", "required for idx data")
        need(0.0 < self.data.test_fraction < 1.0, "data.test_fraction", "must be in (0, 1)")
        need(self.data.partition.mode in ("iid", "label_skew"), "data.partition.mode",
             "must be iid or label_skew")
        need(self.data.partition.num_clients >= 1, "data.partition.num_clients", "must be >= 1")
        need(self.round.local_iters >= 1, "round.local_iters", "must be >= 1")
        need(self.round.batch_size >= 1, "round.batch_size", "must be >= 1")
        need(self.round.reconfig_interval >= 1, "round.reconfig_interval", "must be >= 1")
        need(self.sgd.lr > 0, "sgd.lr", "must be > 0")
        need(0.0 <= self.sgd.momentum < 1.0, "sgd.momentum", "must be in [0, 1)")
        need(self.cost.c_seconds >= 0, "cost.c_seconds", "must be >= 0")
        if self.method in ("oneshot", "iterative"):
            need(self.matched_density is not None or self.matched_summary is not None,
                 "matched_density", f"required for method {self.method}")
        if self.matched_density is not None:
            need(0.0 < self.matched_density <= 1.0, "matched_density", "must be in (0, 1]")
        s = self.schedules
        if (s.density_limit is None) != (s.density_target is None):
            raise ConfigError("schedules.density_target: set together with density_limit")
        if s.density_limit is not None:
            need(s.r_max is not None, "schedules.r_max", "required with a density cap")
        return self


def _field_types(cls):
    return typing.get_type_hints(cls)


def _coerce(value, tp, path):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is Union:
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, path)
            except ConfigError as e:
                errors.append(str(e))
        raise ConfigError(errors[0] if errors else f"{path}: invalid value {value!r}")
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        if math.isnan(value):
            raise ConfigError(f"{path}: NaN not allowed")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported type {tp}")


def _build(cls, d, path=""):
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {d!r}")
    types = _field_types(cls)
    unknown = sorted(set(d) - set(types))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key {where}{unknown[0]}")
    kwargs = {}
    for name, value in d.items():
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(value, types[name], sub)
    return cls(**kwargs)


def from_dict(d) -> ExperimentConfig:
    return _build(ExperimentConfig, d).validate()


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def apply_overrides(d: dict, overrides) -> dict:
    """Set dotted ``key.path=value`` pairs; values are parsed as YAML scalars."""
    d = copy.deepcopy(d) if d else {}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if not all(parts):
            raise ConfigError(f"override {item!r} has an empty key")
        node = d
        for p in parts[:-1]:
            nxt = node.get(p)
            if nxt is None:
                nxt = node[p] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key}: {p} is not a section")
            node = nxt
        node[parts[-1]] = yaml.safe_load(raw)
    return d


def load(path=None, overrides=()) -> ExperimentConfig:
    raw = {}
    if path is not None:
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
    return from_dict(apply_overrides(raw, overrides))
