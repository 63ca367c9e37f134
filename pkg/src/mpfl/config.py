"""Experiment configuration: a versioned YAML document with nested sections.

Every run is fully described by one file plus an optional set of flag
overrides; all randomness flows from the single ``seed``.  ``load_config``
and ``dump_config`` round-trip exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .model import ArchSpec

CONFIG_VERSION = 1

ALGORITHMS = ("mpfl", "pruning_fl", "lth_central", "fedavg")

# Two schedule presets: five 10% rounds (the default) and a stretched
# ten-round variant at the same per-round rate.
SCHEDULE_PRESETS = {
    "five_by_ten": [0.1] * 5,
    "ten_by_ten": [0.1] * 10,
}


def _require(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _as_int(val: Any, path: str) -> int:
    _require(isinstance(val, int) and not isinstance(val, bool), path, f"expected an integer, got {val!r}")
    return val


def _as_float(val: Any, path: str) -> float:
    _require(isinstance(val, (int, float)) and not isinstance(val, bool), path, f"expected a number, got {val!r}")
    return float(val)


def _as_str(val: Any, path: str) -> str:
    _require(isinstance(val, str), path, f"expected a string, got {val!r}")
    return val


def _as_dict(val: Any, path: str) -> dict:
    _require(isinstance(val, dict), path, f"expected a mapping, got {type(val).__name__}")
    return val


@dataclass
class ArchConfig:
    input_dim: int = 64
    hidden: list[int] = field(default_factory=lambda: [512])
    classes: int = 10

    def to_spec(self) -> ArchSpec:
        return ArchSpec.mlp([self.input_dim, *self.hidden, self.classes])


@dataclass
class DatasetConfig:
    kind: str = "blobs"  # blobs | csv | idx
    samples: int = 5000
    features: int = 64
    classes: int = 10
    cluster_std: float = 1.0
    test_fraction: float = 0.2
    path: str = ""          # csv
    label_column: str = "label"
    features_path: str = ""  # idx
    labels_path: str = ""
    # precision of the raw source values, used only to cost the centralized
    # baseline's one-shot data upload (8 for byte-per-channel images)
    raw_feature_bits: int = 32


@dataclass
class TrainingConfig:
    lr: float = 0.1
    epochs_per_round: int = 3
    batch_size: int = 64


@dataclass
class PruningConfig:
    scoring: str = "weight"  # weight | gradient
    p: int = 2
    schedule: list[float] = field(default_factory=lambda: list(SCHEDULE_PRESETS["five_by_ten"]))
    target_sparsity: float | None = None  # defaults to sum(schedule)
    min_keep: int | list[int] = 1

    def resolved_target(self) -> float:
        return sum(self.schedule) if self.target_sparsity is None else self.target_sparsity


@dataclass
class ConsensusConfig:
    strategy: str = "topk"  # topk | histogram
    agreement: float = 0.9


@dataclass
class ContaminationSpec:
    node: int
    kind: str  # noise | labels
    sigma: float = 1.0


@dataclass
class TransportConfig:
    kind: str = "loopback"  # loopback | tcp
    host: str = "127.0.0.1"
    port: int = 0  # 0 lets the OS pick


@dataclass
class WireConfig:
    precision_bits: int = 32
    delta_masks: bool = False
    count_headers: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 7
    algorithm: str = "mpfl"
    nodes: int = 10
    final_rounds: int = 10
    version: int = CONFIG_VERSION
    arch: ArchConfig = field(default_factory=ArchConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    pruning: PruningConfig = field(default_factory=PruningConfig)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    transport: TransportConfig = field(default_factory=TransportConfig)
    wire: WireConfig = field(default_factory=WireConfig)
    contamination: list[ContaminationSpec] = field(default_factory=list)

    def validate(self) -> "ExperimentConfig":
        _require(self.version == CONFIG_VERSION, "version",
                 f"this build reads config version {CONFIG_VERSION}, got {self.version}")
        _require(self.algorithm in ALGORITHMS, "algorithm",
                 f"must be one of {ALGORITHMS}, got {self.algorithm!r}")
        _require(self.nodes >= 1, "nodes", "need at least one node")
        _require(self.final_rounds >= 0, "final_rounds", "must be >= 0")
        _require(self.training.lr > 0, "training.lr", "must be positive")
        _require(self.training.epochs_per_round >= 0, "training.epochs_per_round", "must be >= 0")
        _require(self.training.batch_size >= 1, "training.batch_size", "must be >= 1")
        _require(self.pruning.scoring in ("weight", "gradient"), "pruning.scoring",
                 f"must be 'weight' or 'gradient', got {self.pruning.scoring!r}")
        _require(self.pruning.p in (1, 2), "pruning.p", "must be 1 or 2")
        for i, inc in enumerate(self.pruning.schedule):
            _require(0.0 < inc < 1.0, f"pruning.schedule[{i}]",
                     f"increments must be in (0, 1), got {inc}")
        target = self.pruning.resolved_target()
        _require(abs(sum(self.pruning.schedule) - target) < 1e-9,
                 "pruning.target_sparsity",
                 f"schedule increments sum to {sum(self.pruning.schedule):.6g}, "
                 f"not the target {target:.6g}")
        _require(self.consensus.strategy in ("topk", "histogram"), "consensus.strategy",
                 f"must be 'topk' or 'histogram', got {self.consensus.strategy!r}")
        _require(0.0 < self.consensus.agreement <= 1.0, "consensus.agreement",
                 "must be in (0, 1]")
        _require(self.wire.precision_bits in (32, 64), "wire.precision_bits",
                 "must be 32 or 64")
        _require(self.transport.kind in ("loopback", "tcp"), "transport.kind",
                 f"must be 'loopback' or 'tcp', got {self.transport.kind!r}")
        _require(self.dataset.kind in ("blobs", "csv", "idx"), "dataset.kind",
                 f"must be 'blobs', 'csv' or 'idx', got {self.dataset.kind!r}")
        if self.dataset.kind == "blobs":
            _require(self.dataset.samples >= self.nodes, "dataset.samples",
                     "need at least one sample per node")
            _require(self.dataset.features == self.arch.input_dim, "dataset.features",
                     f"dataset has {self.dataset.features} features, "
                     f"architecture expects {self.arch.input_dim}")
            _require(self.dataset.classes == self.arch.classes, "dataset.classes",
                     f"dataset has {self.dataset.classes} classes, "
                     f"architecture expects {self.arch.classes}")
        _require(0.0 < self.dataset.test_fraction < 1.0, "dataset.test_fraction",
                 "must be in (0, 1)")
        _require(self.dataset.raw_feature_bits >= 1, "dataset.raw_feature_bits",
                 "must be >= 1")
        seen = set()
        for i, c in enumerate(self.contamination):
            _require(0 <= c.node < self.nodes, f"contamination[{i}].node",
                     f"node id {c.node} outside [0, {self.nodes})")
            _require(c.node not in seen, f"contamination[{i}].node",
                     f"node {c.node} contaminated twice")
            seen.add(c.node)
            _require(c.kind in ("noise", "labels"), f"contamination[{i}].kind",
                     f"must be 'noise' or 'labels', got {c.kind!r}")
            if c.kind == "noise":
                _require(c.sigma >= 0, f"contamination[{i}].sigma", "must be >= 0")
        if isinstance(self.pruning.min_keep, list):
            n_layers = len(self.arch.hidden) + 1
            _require(len(self.pruning.min_keep) == n_layers, "pruning.min_keep",
                     f"{len(self.pruning.min_keep)} entries for {n_layers} dense layers")
        # ArchSpec construction validates layer chaining and positive dims
        self.arch.to_spec()
        return self


def _build(cls, raw: dict, path: str):
    """Construct a section dataclass, rejecting unknown keys with their path."""
    known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    for key in raw:
        _require(key in known, f"{path}.{key}" if path else key, "unknown key")
    try:
        return cls(**raw)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(_as_dict(raw, "config"))
    sections = {
        "arch": ArchConfig,
        "dataset": DatasetConfig,
        "training": TrainingConfig,
        "pruning": PruningConfig,
        "consensus": ConsensusConfig,
        "transport": TransportConfig,
        "wire": WireConfig,
    }
    kwargs: dict[str, Any] = {}
    for name, cls in sections.items():
        if name in raw:
            kwargs[name] = _build(cls, _as_dict(raw.pop(name), name), name)
    cont = raw.pop("contamination", [])
    _require(isinstance(cont, list), "contamination", "expected a list")
    kwargs["contamination"] = [
        _build(ContaminationSpec, _as_dict(c, f"contamination[{i}]"), f"contamination[{i}]")
        for i, c in enumerate(cont)
    ]
    for key in ("seed", "nodes", "final_rounds", "version"):
        if key in raw:
            kwargs[key] = _as_int(raw.pop(key), key)
    if "algorithm" in raw:
        kwargs["algorithm"] = _as_str(raw.pop("algorithm"), "algorithm")
    for key in raw:
        raise ConfigError(f"{key}: unknown key")
    try:
        cfg = ExperimentConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    return cfg.validate()


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from None
    except OSError as e:
        raise ConfigError(str(e)) from None
    if raw is None:
        raw = {}
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig, path: str | Path | None = None) -> str:
    text = yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Re-build the config with dotted-path overrides (flag wins over file)."""
    raw = config_to_dict(cfg)
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        cursor: Any = raw
        for p in parts[:-1]:
            _require(isinstance(cursor, dict) and p in cursor, dotted, "unknown key path")
            cursor = cursor[p]
        leaf = parts[-1]
        if leaf.isdigit() and isinstance(cursor, list):
            cursor[int(leaf)] = value
        else:
            _require(isinstance(cursor, dict) and leaf in cursor, dotted, "unknown key path")
            cursor[leaf] = value
    return config_from_dict(raw)
