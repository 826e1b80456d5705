"""Scenario configuration: a flat YAML mapping, validated key by key.

See docs/config.md for the schema and the reasoning behind each default.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import yaml

from .fedavg import POLICY_MODES, THRESHOLD_FILTER, SelectionPolicy
from .netsim import NetConfig, Partition
from .tensor_nn import MLP_SYNTHETIC, SIMPLE_NN_CIFAR

CENTRALIZED = "centralized"
DECENTRALIZED = "decentralized"
WAIT_ALL, QUORUM, TIMEOUT = "wait_all", "quorum", "timeout"
TRIGGER_MODES = (WAIT_ALL, QUORUM, TIMEOUT)
DATASETS = ("cifar10", "synthetic")
ARCHITECTURES = (SIMPLE_NN_CIFAR, MLP_SYNTHETIC)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AggregationTrigger:
    mode: str = WAIT_ALL
    quorum_size: int | None = None
    timeout: float | None = None

    def check(self, peer_count: int) -> None:
        if self.mode not in TRIGGER_MODES:
            raise ConfigError(f"trigger: unknown mode {self.mode!r}")
        if self.mode == QUORUM:
            if self.quorum_size is None or not 1 <= self.quorum_size <= peer_count:
                raise ConfigError(f"quorum_size: must be in [1, {peer_count}], got {self.quorum_size}")
        if self.mode == TIMEOUT and (self.timeout is None or not self.timeout > 0):
            raise ConfigError(f"timeout: must be > 0 in timeout mode, got {self.timeout}")


@dataclass(frozen=True)
class ScenarioConfig:
    mode: str = DECENTRALIZED
    dataset: str = "synthetic"
    peers: int = 3
    rounds: int = 10
    epochs: int = 5
    learning_rate: float = 0.01
    batch_size: int = 32
    architecture: str | None = None
    hidden: int = 16
    data_dir: str | None = None
    train_subset: int = 0
    synthetic_n: int = 600
    synthetic_classes: int = 2
    synthetic_dim: int = 10
    synthetic_margin: float = 4.0
    policy: str = "not_consider"
    threshold: float | None = None
    trigger: str = WAIT_ALL
    quorum_size: int | None = None
    timeout: float | None = None
    latency_min: float = 1.0
    latency_max: float = 1.0
    drop_probability: float = 0.0
    partitions: tuple = ()
    difficulty: int = 12
    block_interval: float = 10.0
    mining: bool = True
    train_cost: float = 0.001
    mining_cost_factor: float = 1.0
    strict_chain: bool = False
    seed: int = 0
    threads: int = 1
    max_events: int = 1_000_000

    def __post_init__(self):
        parts = tuple(_partition(p, i) for i, p in enumerate(self.partitions))
        object.__setattr__(self, "partitions", parts)
        self.validate()

    # derived sub-configs -------------------------------------------------
    @property
    def arch(self) -> str:
        if self.architecture:
            return self.architecture
        return SIMPLE_NN_CIFAR if self.dataset == "cifar10" else MLP_SYNTHETIC

    @property
    def selection(self) -> SelectionPolicy:
        return SelectionPolicy(self.policy, self.threshold, self.seed)

    @property
    def aggregation_trigger(self) -> AggregationTrigger:
        return AggregationTrigger(self.trigger, self.quorum_size, self.timeout)

    @property
    def net(self) -> NetConfig:
        return NetConfig(self.latency_min, self.latency_max, self.drop_probability,
                         tuple(Partition(frozenset(p["peers"]), p["start"], p["end"])
                               for p in self.partitions), self.seed)

    def resolved_data_dir(self) -> str | None:
        return self.data_dir or os.environ.get("FEDCHAIN_DATA")

    # validation ----------------------------------------------------------
    def validate(self) -> None:
        def need(ok, key, msg):
            if not ok:
                raise ConfigError(f"{key}: {msg}")

        need(self.mode in (CENTRALIZED, DECENTRALIZED), "mode", f"unknown mode {self.mode!r}")
        need(self.dataset in DATASETS, "dataset", f"must be one of {DATASETS}")
        need(self.peers >= 1, "peers", f"must be >= 1, got {self.peers}")
        need(self.rounds >= 0, "rounds", f"must be >= 0, got {self.rounds}")
        need(self.epochs >= 1, "epochs", f"must be >= 1, got {self.epochs}")
        need(self.learning_rate > 0, "learning_rate", f"must be > 0, got {self.learning_rate}")
        need(self.batch_size >= 1, "batch_size", f"must be >= 1, got {self.batch_size}")
        need(self.architecture is None or self.architecture in ARCHITECTURES, "architecture",
             f"must be one of {ARCHITECTURES}")
        need(self.hidden >= 0, "hidden", "must be >= 0")
        need(self.train_subset >= 0, "train_subset", "must be >= 0")
        need(self.synthetic_n >= self.synthetic_classes >= 1, "synthetic_n",
             "need synthetic_n >= synthetic_classes >= 1")
        need(self.synthetic_dim >= 1, "synthetic_dim", "must be >= 1")
        need(self.synthetic_margin > 0, "synthetic_margin", "must be > 0")
        need(self.policy in POLICY_MODES, "policy", f"must be one of {POLICY_MODES}")
        if self.policy == THRESHOLD_FILTER:
            need(self.threshold is not None and 0 <= self.threshold <= 1, "threshold",
                 "threshold_filter needs a threshold in [0, 1]")
        else:
            need(self.threshold is None, "threshold", "only valid with policy threshold_filter")
        self.aggregation_trigger.check(self.peers)
        need(self.latency_min >= 0, "latency_min", "must be >= 0")
        need(self.latency_max >= self.latency_min, "latency_max", "must be >= latency_min")
        need(0 <= self.drop_probability < 1, "drop_probability", "must be in [0, 1)")
        need(self.difficulty >= 0 and self.difficulty <= 64, "difficulty", "must be in [0, 64]")
        need(self.block_interval > 0, "block_interval", "must be > 0")
        need(self.train_cost >= 0, "train_cost", "must be >= 0")
        need(self.mining_cost_factor > 0, "mining_cost_factor", "must be > 0")
        need(self.threads >= 1, "threads", "must be >= 1")
        need(self.max_events >= 1, "max_events", "must be >= 1")

    def replace(self, **changes) -> ScenarioConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["partitions"] = [dict(p) for p in self.partitions]
        return d


def _partition(p, i):
    key = f"partitions[{i}]"
    if not isinstance(p, dict) or set(p) != {"peers", "start", "end"}:
        raise ConfigError(f"{key}: expected a mapping with keys peers, start, end")
    try:
        return {"peers": sorted(int(x) for x in p["peers"]),
                "start": float(p["start"]), "end": float(p["end"])}
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from None


_FIELDS = {f.name: f for f in fields(ScenarioConfig)}


def _coerce(key: str, value: Any):
    f = _FIELDS[key]
    ann = str(f.type)
    if value is None:
        if "None" in ann:
            return None
        raise ConfigError(f"{key}: must not be null")
    if ann.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if ann.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if ann.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if ann.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if key == "partitions":
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list")
        return tuple(value)
    return value


def config_from_mapping(data: dict) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(data) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")
    kwargs = {k: _coerce(k, v) for k, v in data.items()}
    return ScenarioConfig(**kwargs)


def parse_config(path) -> ScenarioConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return config_from_mapping(data or {})


def dump_config(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=False)


def write_config(cfg: ScenarioConfig, path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
