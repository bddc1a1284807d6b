"""Configuration dataclasses and the JSON config file format.

A config file is one JSON object with up to three sections::

    {"encoder": {...EncoderConfig keys...},
     "train":   {...TrainConfig keys...},
     "data":    {...DataConfig keys, "domains": [DomainSpec, ...]}}

Missing sections and keys fall back to defaults; unknown keys raise
:class:`ConfigError`.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError


def _from_mapping(cls, raw: dict[str, Any], where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    aliases = getattr(cls, "_json_aliases", {})
    kwargs = {}
    for key, value in raw.items():
        name = aliases.get(key, key)
        if name not in names or name in aliases.values() and key not in aliases:
            raise ConfigError(f"{where}: unknown key {key!r}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _to_mapping(obj) -> dict[str, Any]:
    aliases = {v: k for k, v in getattr(type(obj), "_json_aliases", {}).items()}
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            value = _to_mapping(value)
        elif isinstance(value, (list, tuple)):
            value = [_to_mapping(v) if dataclasses.is_dataclass(v) else v for v in value]
        out[aliases.get(f.name, f.name)] = value
    return out


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 16
    depth: int = 2
    num_heads: int = 2
    adapter_rank: int = 4
    num_labels: int = 2
    in_channels: int = 1
    mlp_ratio: int = 4
    decoder_depth: int = 2

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ValueError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if not 1 <= self.adapter_rank < self.embed_dim:
            raise ValueError(f"adapter_rank must satisfy 1 <= r < embed_dim, got {self.adapter_rank}")
        if self.num_labels < 2:
            raise ValueError("num_labels counts background and must be >= 2")
        if self.depth < 0 or self.decoder_depth < 0:
            raise ValueError("depth must be non-negative")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @classmethod
    def toy(cls, **overrides) -> EncoderConfig:
        return cls(**overrides)

    @classmethod
    def vitb(cls, **overrides) -> EncoderConfig:
        base = dict(image_size=384, patch_size=16, embed_dim=768, depth=12, num_heads=12, in_channels=3)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.8
    dice_epsilon: float = 1e-5

    _json_aliases = {"lambda": "lam"}

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if not self.dice_epsilon > 0:
            raise ValueError("dice_epsilon must be positive")


@dataclass(frozen=True)
class Toggles:
    low_level_fusion: bool = True
    channel_filter: bool = True
    prompt_generator: bool = True


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 5e-4
    weight_decay: float = 0.1
    warmup_steps: int = 250
    max_epochs: int = 200
    stop_epoch: int = 160
    lam: float = 0.8
    bank_size: int = 256
    batch_size: int = 8
    seed: int = 0
    toggles: Toggles = field(default_factory=Toggles)
    dice_epsilon: float = 1e-5
    train_domain: str = "A"
    val_fraction: float = 0.1

    _json_aliases = {"lambda": "lam"}

    def __post_init__(self):
        if isinstance(self.toggles, dict):
            object.__setattr__(self, "toggles", _from_mapping(Toggles, self.toggles, "train.toggles"))
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.stop_epoch > self.max_epochs:
            raise ValueError(f"stop_epoch {self.stop_epoch} exceeds max_epochs {self.max_epochs}")
        if self.bank_size < 0:
            raise ValueError("bank_size must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        LossConfig(self.lam, self.dice_epsilon)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.lam, self.dice_epsilon)

    @property
    def use_prompt(self) -> bool:
        return self.toggles.prompt_generator and self.bank_size > 0


@dataclass(frozen=True)
class DomainSpec:
    name: str
    gamma: float = 1.0
    bias_amp: float = 0.0
    noise_std: float = 0.0
    contrast: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"domain {self.name}: gamma must be > 0")
        if self.noise_std < 0:
            raise ValueError(f"domain {self.name}: noise_std must be >= 0")
        if not 0 <= self.bias_amp < 1:
            raise ValueError(f"domain {self.name}: bias_amp must lie in [0, 1)")


# Six prostate-style sites, loosely ordered from mild to strong shift.
PROSTATE_DOMAINS = (
    DomainSpec("A", gamma=1.0, bias_amp=0.05, noise_std=0.02, contrast=1.0),
    DomainSpec("B", gamma=0.8, bias_amp=0.10, noise_std=0.03, contrast=1.15),
    DomainSpec("C", gamma=1.3, bias_amp=0.15, noise_std=0.04, contrast=0.85),
    DomainSpec("D", gamma=1.1, bias_amp=0.10, noise_std=0.02, contrast=1.25),
    DomainSpec("E", gamma=0.85, bias_amp=0.20, noise_std=0.03, contrast=0.8),
    DomainSpec("F", gamma=1.4, bias_amp=0.10, noise_std=0.05, contrast=1.1),
)

FUNDUS_DOMAINS = (
    DomainSpec("BinRushed", gamma=1.0, bias_amp=0.10, noise_std=0.02, contrast=1.0),
    DomainSpec("Magrabia", gamma=0.8, bias_amp=0.15, noise_std=0.03, contrast=1.2),
    DomainSpec("BASE1", gamma=1.3, bias_amp=0.20, noise_std=0.03, contrast=0.9),
    DomainSpec("BASE2", gamma=1.6, bias_amp=0.10, noise_std=0.05, contrast=0.8),
    DomainSpec("BASE3", gamma=0.7, bias_amp=0.25, noise_std=0.04, contrast=1.3),
)


@dataclass(frozen=True)
class DataConfig:
    domains: tuple[DomainSpec, ...] = PROSTATE_DOMAINS
    samples_per_domain: int = 50
    image_size: int = 64
    num_labels: int = 2
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        doms = tuple(
            d if isinstance(d, DomainSpec) else _from_mapping(DomainSpec, d, "data.domains[]") for d in self.domains
        )
        object.__setattr__(self, "domains", doms)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        names = [d.name for d in doms]
        if not names:
            raise ValueError("at least one domain is required")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate domain names: {names}")
        if self.num_labels not in (2, 3):
            raise ValueError("synthetic suites support num_labels 2 or 3")
        if self.samples_per_domain < 1 or self.image_size < 8:
            raise ValueError("samples_per_domain must be >= 1 and image_size >= 8")
        if len(self.spacing) != 2 or min(self.spacing) <= 0:
            raise ValueError("spacing must be two positive numbers")

    @classmethod
    def fundus(cls, **overrides) -> DataConfig:
        base = dict(domains=FUNDUS_DOMAINS, num_labels=3)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict[str, Any]:
        return _to_mapping(self)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> RunConfig:
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        sections = {"encoder": EncoderConfig, "train": TrainConfig, "data": DataConfig}
        unknown = set(raw) - set(sections)
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        built = {name: _from_mapping(kind, raw.get(name, {}), name) for name, kind in sections.items()}
        return cls(**built)

    def replace_train(self, **changes) -> RunConfig:
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **changes))


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(raw)
