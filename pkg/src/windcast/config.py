"""YAML run configuration with strict key checking."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from windcast.abed import AbedConfig
from windcast.errors import ConfigError
from windcast.evaluator import StrataConfig
from windcast.featurecube import WindowConfig
from windcast.geogrid import GridSpec
from windcast.synthgen import FieldSpec
from windcast.trainer import TrainConfig


@dataclass(frozen=True)
class SynthSection:
    n_stations: int = 5
    n_label_stations: int = 2
    days: int = 8
    start: str = "2022-01-21T00:00"
    amplitude: float = 10.0
    wavelength_deg: float = 10.0
    diurnal_amplitude: float = 5.0
    phase_gradient: float = 0.0
    alpha: float = 1.2
    noise_sd: float = 0.0


@dataclass(frozen=True)
class PathsSection:
    data_dir: str = "data"
    corrections: str | None = None
    cube: str = "cube.wcub"
    checkpoint: str = "model.wabd"


@dataclass(frozen=True)
class RunConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    window: WindowConfig = field(default_factory=WindowConfig)
    model: AbedConfig = field(default_factory=AbedConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    strata: StrataConfig = field(default_factory=StrataConfig)
    synth: SynthSection = field(default_factory=SynthSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            section = dataclasses.asdict(getattr(self, f.name))
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def dump(self, path):
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        tmp.replace(path)

    def scenario(self, seed: int):
        from windcast.synthgen import ScenarioConfig

        s = self.synth
        fs = FieldSpec(s.amplitude, s.wavelength_deg, s.diurnal_amplitude, s.phase_gradient)
        return ScenarioConfig(self.grid, s.n_stations, s.n_label_stations, s.days, seed, s.start, fs,
                              s.alpha, s.noise_sd)


_SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_CLASSES = {"grid": GridSpec, "window": WindowConfig, "model": AbedConfig, "train": TrainConfig,
            "strata": StrataConfig, "synth": SynthSection, "paths": PathsSection}


def _build(section: str, values) -> object:
    cls = _CLASSES[section]
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key {section}.{unknown[0]}")
    clean = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**clean)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {section}: {exc}") from exc


def from_dict(data: dict | None) -> RunConfig:
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("run configuration must be a mapping of sections")
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]}")
    return RunConfig(**{name: _build(name, data.get(name)) for name in _SECTIONS})


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    return from_dict(data)


def override(cfg: RunConfig, section: str, **values) -> RunConfig:
    """Copy of ``cfg`` with keys of one section replaced (validated again)."""
    merged = dataclasses.asdict(getattr(cfg, section))
    merged.update(values)
    return dataclasses.replace(cfg, **{section: _build(section, merged)})
