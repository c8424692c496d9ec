"""Run configuration, loaded from TOML or JSON."""

from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .fgc import DEFAULT_BANK_MOMENTUM, DEFAULT_K, DEFAULT_TAU, NEIGHBOR_SOURCES
from .layers import LayerSpec, NetworkSpec
from .objectives import DEFAULT_ETA, DEFAULT_RHO

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class OptimizerConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: list = field(default_factory=list)
    gamma: float = 0.1
    gate_no_decay: bool = True
    nesterov: bool = True

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for m in self.milestones if epoch >= m)
        return self.lr * self.gamma ** drops


@dataclass
class DatasetConfig:
    kind: str = "synth"
    n_classes: int = 4
    n_per_class: int = 500
    test_per_class: int = 100
    image_size: int = 16
    geometry: str = "bars"
    noise_sigma: float = 0.3
    seed: int = 0
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None


def default_layers() -> list:
    return [
        {"channels": 16, "kernel": 4, "stride": 2, "padding": 1},
        {"channels": 16, "kernel": 4, "stride": 2, "padding": 1},
        {"channels": 32, "kernel": 3, "stride": 1, "padding": 1},
    ]


@dataclass
class NetworkConfig:
    layers: list = field(default_factory=default_layers)
    gate_hidden_ratio: float = 0.25
    gate_hidden_min: int = 8


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    omega: Optional[list] = None
    k: int = DEFAULT_K
    eta: float = DEFAULT_ETA
    rho: float = DEFAULT_RHO
    tau: float = DEFAULT_TAU
    bank_momentum: float = DEFAULT_BANK_MOMENTUM
    neighbor_source: str = "feature_independent"
    shared_layer: Optional[int] = None
    cosine: bool = False
    epochs: int = 60
    batch_size: int = 128
    eval_batch_size: int = 500
    seed: int = 0

    # -- derived --------------------------------------------------------
    def layer_specs(self) -> list:
        return [LayerSpec(**l) if isinstance(l, dict) else l for l in self.network.layers]

    def resolved_omega(self) -> list:
        """Explicit omega, or the last third (at least one) of the gated layers."""
        gated = [i for i, l in enumerate(self.layer_specs()) if l.gated]
        if self.omega is not None:
            return sorted(int(i) for i in self.omega)
        if not gated:
            return []
        return gated[-max(1, math.ceil(len(gated) / 3)):]

    def network_spec(self, in_channels: int, image_size: int, num_classes: int) -> NetworkSpec:
        omega = set(self.resolved_omega())
        layers = []
        for i, l in enumerate(self.layer_specs()):
            d = asdict(l)
            d["fgc"] = i in omega
            layers.append(LayerSpec(**d))
        return NetworkSpec(in_channels, image_size, num_classes, layers,
                           self.network.gate_hidden_ratio, self.network.gate_hidden_min)

    def validate(self) -> None:
        layers = self.layer_specs()
        omega = self.resolved_omega()
        for i in omega:
            if not 0 <= i < len(layers):
                raise ConfigError(f"omega index {i} out of range for {len(layers)} layers")
            if not layers[i].gated:
                raise ConfigError(f"omega index {i} names an ungated layer")
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.eta < 0 or self.rho < 0:
            raise ConfigError("eta and rho must be non-negative")
        if not 0.0 <= self.bank_momentum <= 1.0:
            raise ConfigError("bank_momentum must lie in [0, 1]")
        if self.neighbor_source not in NEIGHBOR_SOURCES:
            raise ConfigError(f"neighbor_source must be one of {NEIGHBOR_SOURCES}")
        if self.neighbor_source == "feature_shared" and omega:
            shared = self.shared_source_layer()
            if shared not in omega:
                raise ConfigError(f"shared_layer {shared} must be one of the coupled layers {omega}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer.lr <= 0 or not 0 <= self.optimizer.momentum < 1:
            raise ConfigError("optimizer needs lr > 0 and momentum in [0, 1)")
        if self.dataset.kind not in ("synth", "idx"):
            raise ConfigError(f"dataset.kind must be 'synth' or 'idx', got {self.dataset.kind!r}")
        if self.dataset.kind == "idx" and not (self.dataset.train_images and self.dataset.train_labels):
            raise ConfigError("idx datasets need train_images and train_labels paths")

    def shared_source_layer(self) -> int:
        omega = self.resolved_omega()
        return self.shared_layer if self.shared_layer is not None else omega[-1]

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        blocks = {"network": NetworkConfig, "dataset": DatasetConfig, "optimizer": OptimizerConfig}
        for key, block in blocks.items():
            if key in d and isinstance(d[key], dict):
                sub_known = {f.name for f in fields(block)}
                bad = set(d[key]) - sub_known
                if bad:
                    raise ConfigError(f"unknown fields in [{key}]: {sorted(bad)}")
                d[key] = block(**d[key])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return RunConfig.from_dict(data)
