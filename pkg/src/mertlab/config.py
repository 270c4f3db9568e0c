"""Run configuration: YAML files with strict keys plus ``--section.key value`` overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dsp import CQTParams
from .model import ModelConfig
from .pretrain import TrainConfig
from .probe import ProbeConfig
from .teachers import TeacherConfig


class ConfigKeyError(KeyError):
    def __str__(self):
        return str(self.args[0])


@dataclass
class DataConfig:
    n_clips: int = 64
    clip_seconds: float = 2.0
    sample_rate: int = 24000
    seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def canonical_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


SECTIONS = {"data": DataConfig, "model": ModelConfig, "teacher": TeacherConfig, "train": TrainConfig, "probe": ProbeConfig}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(default, value, where: str):
    """YAML 1.1 reads exponent floats without a dot ("1e-3") as strings; turn them back into floats."""
    if isinstance(default, float) and isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            raise ValueError(f"{where}: expected a number, got {value!r}") from None
    if isinstance(default, tuple) and default and isinstance(default[0], float) and isinstance(value, (list, tuple)):
        return tuple(_coerce(default[0], v, where) for v in value)
    return value


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigKeyError(f"{where}: expected a mapping, got {type(values).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigKeyError(f"unknown key(s) in {where}: {', '.join(unknown)} (allowed: {', '.join(sorted(names))})")
    values = dict(values)
    defaults = {f.name: f.default for f in dataclasses.fields(cls) if f.default is not dataclasses.MISSING}
    for name, value in values.items():
        if name in defaults:
            values[name] = _coerce(defaults[name], value, f"{where}.{name}")
    if cls is TeacherConfig and isinstance(values.get("cqt"), dict):
        values["cqt"] = _build(CQTParams, values["cqt"], f"{where}.cqt")
    return cls(**values)


def from_dict(d: dict | None) -> RunConfig:
    d = dict(d or {})
    unknown = sorted(set(d) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigKeyError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {name: _build(cls, d.get(name) or {}, name) for name, cls in SECTIONS.items()}
    return RunConfig(seed=int(d.get("seed", 0)), **kwargs)


def parse_overrides(items: list[str]) -> dict:
    """``["train.lr=1e-3", "seed=2"]`` or ``["--train.lr", "1e-3"]`` -> nested dict (YAML-typed values)."""
    out: dict = {}
    pending = None
    pairs = []
    for item in items:
        if pending is not None:
            pairs.append((pending, item))
            pending = None
        elif item.startswith("--") and "=" not in item:
            pending = item[2:]
        else:
            key, sep, value = item.lstrip("-").partition("=")
            if not sep:
                raise ConfigKeyError(f"override {item!r} must look like key=value")
            pairs.append((key, value))
    if pending is not None:
        raise ConfigKeyError(f"override --{pending} has no value")
    for key, value in pairs:
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(value)
    return out


def _merge(base: dict, over: dict) -> dict:
    merged = dict(base)
    for k, v in over.items():
        merged[k] = _merge(merged[k], v) if isinstance(v, dict) and isinstance(merged.get(k), dict) else v
    return merged


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    base = {}
    if path is not None:
        base = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(base, dict):
            raise ConfigKeyError(f"{path}: top level must be a mapping")
    return from_dict(_merge(base, parse_overrides(overrides or [])))


def save_config(path: str | Path, config: RunConfig) -> None:
    Path(path).write_text(config.to_yaml())


def desk_config(seed: int = 0) -> RunConfig:
    """Small settings used by the acceptance checks and the smoke runs on a CPU."""
    return from_dict({
        "seed": seed,
        "model": {"d_model": 96, "n_layers": 3, "n_heads": 4, "ffn_dim": 384, "pos_conv_kernel": 32,
                  "pos_conv_groups": 16, "head_vocab": [32] * 8, "codeword_dim": 32},
        "teacher": {"kind": "rvq", "rvq_k": 32, "seed": seed},
        "train": {"steps": 300, "batch_clips": 8, "lr": 1e-3, "warmup_steps": 20, "seed": seed},
    })
