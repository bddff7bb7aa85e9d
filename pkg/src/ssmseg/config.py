"""Run configuration: one YAML file with nested sections (data, network,
gva, lsa, train), strict key checking, and dotted-path overrides.

Unknown sections or keys are errors, not warnings. ``--set a.b=value``
overrides apply after file parsing; values are parsed as YAML scalars.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict, fields
from pathlib import Path

import yaml

from .network import NetworkConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    n_domains: int = 4
    train_per_domain: int = 40
    test_per_domain: int = 10
    size: int = 64
    n_classes: int = 2
    seed: int = 0
    held_out: int | None = None
    folders: dict | None = None      # domain_id -> path, for folder mode


@dataclass
class NetworkSection:
    depths: list[int] = field(default_factory=lambda: [2, 2])
    dims: list[int] = field(default_factory=lambda: [16, 32])
    n_state: int = 8
    patch_size: int = 4
    lsa_encoder: bool = True
    lsa_decoder: bool = True
    use_d_skip: bool = True


@dataclass
class GvaSection:
    enable: bool = True
    tau: float = 0.4                 # 0.03 selectable for darker data
    n_blocks: int = 1


@dataclass
class LsaSection:
    enable: bool = True
    p: float = 0.75


@dataclass
class TrainSection:
    iterations: int = 2000
    batch_size: int = 8
    base_lr: float = 3e-4
    lr_power: float = 0.9
    weight_decay: float = 1e-2
    lambda_consist: float = 0.1
    enable_consistency: bool = True
    grad_clip: float = 5.0
    seed: int = 0
    checkpoint_every_frac: float = 0.1
    augment_data: bool = True


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    gva: GvaSection = field(default_factory=GvaSection)
    lsa: LsaSection = field(default_factory=LsaSection)
    train: TrainSection = field(default_factory=TrainSection)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name))
                for name in ("data", "network", "gva", "lsa", "train")}

    def network_config(self) -> NetworkConfig:
        n = self.network
        return NetworkConfig(depths=list(n.depths), dims=list(n.dims),
                             n_state=n.n_state, patch_size=n.patch_size,
                             n_classes=self.data.n_classes, in_channels=3,
                             lsa_encoder=n.lsa_encoder, lsa_decoder=n.lsa_decoder,
                             lsa_p=self.lsa.p, use_d_skip=n.use_d_skip)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(iterations=t.iterations, batch_size=t.batch_size,
                           base_lr=t.base_lr, lr_power=t.lr_power,
                           weight_decay=t.weight_decay,
                           lambda_consist=t.lambda_consist,
                           lsa_p=self.lsa.p, gva_tau=self.gva.tau,
                           gva_n_blocks=self.gva.n_blocks,
                           enable_gva=self.gva.enable,
                           enable_lsa=self.lsa.enable,
                           enable_consistency=t.enable_consistency,
                           grad_clip=t.grad_clip, seed=t.seed,
                           checkpoint_every_frac=t.checkpoint_every_frac,
                           augment_data=t.augment_data)


_SECTIONS = {"data": DataSection, "network": NetworkSection, "gva": GvaSection,
             "lsa": LsaSection, "train": TrainSection}


def _apply_section(obj, section_name: str, values: dict):
    known = {f.name for f in fields(obj)}
    for key, val in values.items():
        if key not in known:
            raise ConfigError(f"unknown key '{section_name}.{key}' "
                              f"(known: {sorted(known)})")
        setattr(obj, key, val)


def load_config(path: str | Path | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text())
    if raw is None:
        return cfg
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping of sections")
    for section, values in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section '{section}' "
                              f"(known: {sorted(_SECTIONS)})")
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"section '{section}' must be a mapping")
        _apply_section(getattr(cfg, section), section, values)
    return cfg


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' must look like section.key=value")
        dotted, raw_val = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override path '{dotted}' must be section.key")
        section, key = parts
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section '{section}' in override")
        val = yaml.safe_load(raw_val)
        _apply_section(getattr(cfg, section), section, {key: val})
    return cfg


def dump_config(cfg: RunConfig, path: str | Path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
