"""Run configuration: network, optimiser, training schedule and dataset spec."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .segnet import NetworkConfig
from .synthdata import SynthSpec


def _from_dict(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    extra = set(d) - {f.name for f in fields(cls)}
    if extra:
        raise ConfigError(f"unknown {where} keys: {sorted(extra)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class EarlyStop:
    min_delta: float = 1e-4
    patience: int = 10


@dataclass
class OptimizerConfig:
    name: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainingConfig:
    epochs: int = 50
    batch_size: int = 4
    learning_rate: float = 0.01
    lr_decay: float = 0.95
    early_stop: EarlyStop = field(default_factory=EarlyStop)
    side_weight: float = 0.5
    val_fraction: float = 0.2
    folds: int = 1
    augment: bool = True
    augment_noise: float = 0.02


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: SynthSpec = field(default_factory=SynthSpec)
    sample_count: int = 30
    output_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        t, o = self.training, self.optimizer
        self.network.validate()
        if t.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if t.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if t.learning_rate <= 0 or not 0 < t.lr_decay <= 1:
            raise ConfigError("learning_rate must be > 0 and lr_decay in (0, 1]")
        if t.early_stop.min_delta < 0 or t.early_stop.patience < 1:
            raise ConfigError("early_stop needs min_delta >= 0 and patience >= 1")
        if t.side_weight < 0:
            raise ConfigError("side_weight must be >= 0")
        if not 0 < t.val_fraction < 1 or t.folds < 1:
            raise ConfigError("val_fraction must be in (0, 1) and folds >= 1")
        if o.name != "adam" or not (0 <= o.beta1 < 1 and 0 <= o.beta2 < 1 and o.eps > 0):
            raise ConfigError("optimizer must be adam with betas in [0, 1) and eps > 0")
        if self.sample_count < 2:
            raise ConfigError("sample_count must be >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"] = self.data.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d = copy.deepcopy(d)
        extra = set(d) - {f.name for f in fields(cls)}
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        kw = {}
        if "network" in d:
            kw["network"] = NetworkConfig.from_dict(d.pop("network"))
        if "training" in d:
            tr = d.pop("training")
            if isinstance(tr, dict) and "early_stop" in tr:
                tr["early_stop"] = _from_dict(EarlyStop, tr["early_stop"], "early_stop")
            kw["training"] = _from_dict(TrainingConfig, tr, "training")
        if "optimizer" in d:
            kw["optimizer"] = _from_dict(OptimizerConfig, d.pop("optimizer"), "optimizer")
        if "data" in d:
            kw["data"] = SynthSpec.from_dict(d.pop("data"))
        kw.update(d)
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from exc

    def replace(self, **overrides) -> "RunConfig":
        """Copy with dotted-path overrides, e.g. ``{"network.pcam_location": 2}``."""
        d = self.to_dict()
        for path, value in overrides.items():
            node = d
            *parents, leaf = path.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return RunConfig.from_dict(d)
