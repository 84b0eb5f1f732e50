"""Run configuration: one YAML file of sections, each a flat key-value map.

Every default the toolkit relies on appears in ``default_config()``, so
``heatformant config --print-defaults`` shows the complete set of choices.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .baseline import LPCConfig
from .dsp import CANONICAL_SAMPLE_RATE, FrameGeometry
from .model import DecoderConfig, EncoderConfig
from .quantizer import BinSpec
from .train import TrainConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))


@dataclass(frozen=True)
class AudioConfig:
    sample_rate: int = CANONICAL_SAMPLE_RATE
    pre_emphasis: float = 0.97

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not 0.0 <= self.pre_emphasis < 1.0:
            raise ValueError("pre_emphasis must lie in [0, 1)")


@dataclass(frozen=True)
class SynthConfig:
    n: int = 500
    cohorts: tuple[str, ...] = ("men", "women")
    seed: int = 7
    duration: float = 0.15
    drift: bool = True
    test_fraction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "cohorts", tuple(self.cohorts))
        if self.n <= 0:
            raise ValueError("n must be positive")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not 0.0 <= self.test_fraction <= 1.0:
            raise ValueError("test_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class RunConfig:
    audio: AudioConfig = field(default_factory=AudioConfig)
    geometry: FrameGeometry = field(default_factory=FrameGeometry)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    baseline: LPCConfig = field(default_factory=LPCConfig)
    workers: int = 1

    @property
    def bin_spec(self) -> BinSpec:
        return BinSpec.from_geometry(self.audio.sample_rate, self.geometry.fft_size)

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            out[f.name] = _plain(dataclasses.asdict(value)) if dataclasses.is_dataclass(value) else value
        spec = self.bin_spec
        out["bins"] = {"bin_width": spec.bin_width, "num_bins": spec.num_bins, "max_hz": spec.max_hz}
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _plain(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def default_config() -> RunConfig:
    return RunConfig()


def _coerce(value, default, name: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise TypeError(f"{name}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise TypeError(f"{name}: expected a list, got {value!r}")
        elem = default[0] if default else None
        return tuple(_coerce(v, elem, f"{name}[{i}]") if elem is not None else v for i, v in enumerate(value))
    return value


def from_dict(data: dict | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Build a RunConfig, reporting every bad key or value in one ConfigError.

    `overrides` maps dotted keys (``"train.seed"``) to values and is applied
    after the file contents.
    """
    data = dict(data or {})
    problems: list[str] = []
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if key:
            data.setdefault(section, {})
            if isinstance(data[section], dict):
                data[section] = {**data[section], key: value}
        else:
            data[section] = value
    base = default_config()
    kwargs = {}
    for name in data:
        if name not in {f.name for f in dataclasses.fields(RunConfig)} | {"bins"}:
            problems.append(f"unknown section {name!r}")
    for f in dataclasses.fields(RunConfig):
        default = getattr(base, f.name)
        if f.name not in data:
            continue
        raw = data[f.name]
        if not dataclasses.is_dataclass(default):
            try:
                kwargs[f.name] = _coerce(raw, default, f.name)
            except TypeError as exc:
                problems.append(str(exc))
            continue
        if not isinstance(raw, dict):
            problems.append(f"section {f.name!r} must be a mapping")
            continue
        known = {g.name for g in dataclasses.fields(default)}
        values = {}
        ok = True
        for key, value in raw.items():
            if key not in known:
                problems.append(f"unknown key {f.name}.{key}")
                ok = False
                continue
            try:
                values[key] = _coerce(value, getattr(default, key), f"{f.name}.{key}")
            except TypeError as exc:
                problems.append(str(exc))
                ok = False
        if ok:
            try:
                kwargs[f.name] = dataclasses.replace(default, **values)
            except (TypeError, ValueError) as exc:
                problems.append(f"{f.name}: {exc}")
    if problems:
        raise ConfigError(problems)
    cfg = dataclasses.replace(base, **kwargs)
    if "bins" in data:
        expected = cfg.to_dict()["bins"]
        if data["bins"] != expected and isinstance(data["bins"], dict):
            bad = [k for k in data["bins"] if data["bins"][k] != expected.get(k)]
            problems += [f"bins.{k} is derived from audio/geometry and must equal {expected.get(k)!r}" for k in bad]
    if cfg.decoder.num_bins != cfg.geometry.num_bins:
        problems.append(f"decoder.bottleneck_plan must start at {cfg.geometry.num_bins} bins")
    if cfg.workers < 1:
        problems.append("workers must be >= 1")
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    data = None
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError([f"{path}: {exc}"]) from None
        except OSError as exc:
            raise ConfigError([f"{path}: {exc.strerror}"]) from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError([f"{path}: top level must be a mapping of sections"])
    return from_dict(data, overrides)
