"""Run configuration: UTF-8 JSON with strict keys, one section per stage.

Unknown keys are rejected by name so typos fail fast, and every run can
embed its fully resolved configuration (defaults materialized) in the
artifacts it writes.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .audit import ClassifierConfig
from .contrastive import ContrastiveConfig
from .data import SynthSpec
from .diffusion import LdmConfig
from .errors import ConfigError, DataFormatError
from .guidance import AuxConfig
from .mine import MineConfig
from .vae import VaeConfig


@dataclass
class SplitConfig:
    ratio: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError("split ratio must be in (0, 1)")


@dataclass
class ObfuscateConfig:
    w_u: float = 4.5
    w_s: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    batch_size: int = 128

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class SweepConfig:
    w_u_grid: tuple[float, ...] = (1, 2, 3, 4, 5, 6, 7, 8, 9)
    w_s_grid: tuple[float, ...] = (0.0, 0.03, 0.06, 0.09)
    subset: int = 0
    seed: int = 0

    def validate(self) -> None:
        if not self.w_u_grid or not self.w_s_grid:
            raise ConfigError("sweep grids must be nonempty")
        if self.subset < 0:
            raise ConfigError("subset must be >= 0 (0 means the full set)")


_SECTIONS = {
    "data": SynthSpec,
    "split": SplitConfig,
    "vae": VaeConfig,
    "contrastive": ContrastiveConfig,
    "ldm": LdmConfig,
    "aux": AuxConfig,
    "classifier": ClassifierConfig,
    "mine": MineConfig,
    "obfuscate": ObfuscateConfig,
    "sweep": SweepConfig,
}

_GLOBALS = {"seed", "deterministic", "out_dir"}


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = False
    out_dir: str = "."
    data: SynthSpec = field(default_factory=SynthSpec)
    split: SplitConfig = field(default_factory=SplitConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    ldm: LdmConfig = field(default_factory=LdmConfig)
    aux: AuxConfig = field(default_factory=AuxConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    mine: MineConfig = field(default_factory=MineConfig)
    obfuscate: ObfuscateConfig = field(default_factory=ObfuscateConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def validate(self) -> None:
        for name in _SECTIONS:
            section = getattr(self, name)
            if hasattr(section, "validate"):
                section.validate()

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        return _tuples_to_lists(out)


def _tuples_to_lists(value):
    if isinstance(value, tuple):
        return [_tuples_to_lists(v) for v in value]
    if isinstance(value, list):
        return [_tuples_to_lists(v) for v in value]
    if isinstance(value, dict):
        return {k: _tuples_to_lists(v) for k, v in value.items()}
    return value


def _build_section(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {where!r} must be an object")
    allowed = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key {where}.{key}")
        if isinstance(allowed[key].default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config section {where!r}: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - _GLOBALS - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]}")
    cfg = RunConfig()
    for key in _GLOBALS & set(raw):
        setattr(cfg, key, raw[key])
    for name, cls in _SECTIONS.items():
        if name in raw:
            setattr(cfg, name, _build_section(cls, raw[name], name))
    cfg.validate()
    return cfg


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"config {os.fspath(path)!r} is not valid "
                              f"JSON: {exc}") from exc
    return config_from_dict(raw)
