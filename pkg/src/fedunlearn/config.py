"""Experiment configuration, loaded from YAML or JSON.

Unknown keys are rejected so that typos surface as configuration errors
instead of silently falling back to defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import yaml

from .errors import ConfigError, ContractError
from .tensor import SgdConfig


def _build(cls, raw: Optional[dict], where: str):
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class DatasetConfig:
    kind: str = "synth"  # synth | idx | har_csv
    # synth
    clients: int = 5
    classes: int = 4
    dim: int = 2
    samples_per_client: int = 400
    non_iid_skew: float = 0.0
    center_scale: float = 4.0
    spread: float = 1.0
    # idx
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    subset: Optional[int] = None
    test_subset: Optional[int] = None
    # har_csv
    paths: List[str] = field(default_factory=list)
    window_len: int = 50
    stride: int = 25
    num_classes: Optional[int] = None
    # splits
    test_fraction: float = 0.2
    reserve_fraction: float = 0.1

    def __post_init__(self):
        if self.kind not in ("synth", "idx", "har_csv"):
            raise ConfigError(f"dataset.kind must be synth, idx or har_csv, got {self.kind!r}")
        if not 0.0 <= self.reserve_fraction < 1.0:
            raise ConfigError("dataset.reserve_fraction must lie in [0, 1)")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("dataset.test_fraction must lie in [0, 1)")

    def resolve_paths(self, base: Path) -> None:
        for attr in ("train_images", "train_labels", "test_images", "test_labels"):
            v = getattr(self, attr)
            if v is not None and not Path(v).is_absolute():
                setattr(self, attr, str(base / v))
        self.paths = [p if Path(p).is_absolute() else str(base / p) for p in self.paths]

    def check_paths(self) -> None:
        if self.kind == "idx":
            for attr in ("train_images", "train_labels", "test_images", "test_labels"):
                v = getattr(self, attr)
                if v is None:
                    raise ConfigError(f"dataset.{attr} is required for kind=idx")
                if not Path(v).exists():
                    raise ConfigError(f"dataset.{attr}: no such file {v}")
        elif self.kind == "har_csv":
            if not self.paths:
                raise ConfigError("dataset.paths is required for kind=har_csv")
            for p in self.paths:
                if not Path(p).exists():
                    raise ConfigError(f"dataset.paths: no such file {p}")


@dataclass
class PartitionConfig:
    scheme: str = "iid"
    num_clients: int = 10
    shards_per_client: int = 2


@dataclass
class ModelConfig:
    arch: str = "mlp"  # mlp | lenet5 | har_net
    hidden: List[int] = field(default_factory=lambda: [64, 64])

    def __post_init__(self):
        if self.arch not in ("mlp", "lenet5", "har_net"):
            raise ConfigError(f"model.arch must be mlp, lenet5 or har_net, got {self.arch!r}")


@dataclass
class FederationSection:
    rounds: int = 10
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    weighting: str = "sample_count"
    parallel: bool = False

    def sgd(self) -> SgdConfig:
        return SgdConfig(self.learning_rate, self.momentum, self.weight_decay)


@dataclass
class UnlearnSection:
    client: int = 0
    forget_fraction: float = 0.1
    forget_mode: str = "random"
    lam: float = 0.7
    epochs: int = 5
    minibatch: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.0
    weight_decay: float = 0.0
    early_stop_kl: Optional[float] = None
    kl_target: str = "frozen_target"
    pairing: str = "independent"
    third_party: List[str] = field(default_factory=lambda: ["noise", "reserved"])
    third_party_size: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.third_party, str):
            self.third_party = [self.third_party]
        for k in self.third_party:
            if k not in ("noise", "reserved"):
                raise ConfigError(f"unlearn.third_party entries must be noise or reserved, got {k!r}")
        if not self.third_party:
            raise ConfigError("unlearn.third_party must name at least one kind")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"unlearn.lam must lie in [0, 1], got {self.lam}")
        if not 0.0 < self.forget_fraction < 1.0:
            raise ConfigError(f"unlearn.forget_fraction must lie in (0, 1), got {self.forget_fraction}")

    def sgd(self) -> SgdConfig:
        return SgdConfig(self.learning_rate, self.momentum, self.weight_decay)


@dataclass
class MiaSection:
    epochs: int = 200
    learning_rate: float = 0.1
    momentum: float = 0.9


@dataclass
class RetrainSection:
    enabled: bool = True
    same_init: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationSection = field(default_factory=FederationSection)
    unlearn: UnlearnSection = field(default_factory=UnlearnSection)
    mia: MiaSection = field(default_factory=MiaSection)
    retrain: RetrainSection = field(default_factory=RetrainSection)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Optional[Path] = None) -> "ExperimentConfig":
        raw = dict(raw or {})
        sections = {
            "dataset": DatasetConfig, "partition": PartitionConfig, "model": ModelConfig,
            "federation": FederationSection, "unlearn": UnlearnSection, "mia": MiaSection,
            "retrain": RetrainSection,
        }
        unknown = sorted(set(raw) - set(sections) - {"seed", "out"})
        if unknown:
            raise ConfigError(f"unknown top-level keys {unknown}")
        kwargs = {name: _build(sec, raw.get(name), name) for name, sec in sections.items()}
        cfg = cls(seed=int(raw.get("seed", 0)), out=str(raw.get("out", "runs/default")), **kwargs)
        if base_dir is not None:
            cfg.dataset.resolve_paths(base_dir)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(raw, base_dir=path.parent)

    def validate(self) -> None:
        try:
            self.federation.sgd()
            self.unlearn.sgd()
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc
        if self.federation.rounds < 1 or self.federation.batch_size < 1:
            raise ConfigError("federation.rounds and federation.batch_size must be >= 1")
        if self.unlearn.epochs < 1 or self.unlearn.minibatch < 1:
            raise ConfigError("unlearn.epochs and unlearn.minibatch must be >= 1")
        if self.unlearn.kl_target not in ("frozen_target", "live_model"):
            raise ConfigError("unlearn.kl_target must be frozen_target or live_model")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)
