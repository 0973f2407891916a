"""Flat, typed run configuration.

A run config is a flat YAML mapping. Every key belongs to exactly one of the
section dataclasses below; unknown keys and ill-typed values are rejected with
a list of every offending key. Location keys (directories) are excluded from
the config hash so that moving a run does not change its identity.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .augment import AugConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "FRAMEDISTILL_OUT"
PATH_KEYS = ("data_dir", "label_dir", "probe_data_dir", "probe_label_dir", "out_dir")


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


@dataclass
class ProbeConfig:
    probe_iters: int = 1000
    probe_batch: int = 64
    probe_lr: float = 0.01
    probe_seed: int = 0
    probe_train_frames: int = 200
    probe_eval_frames: int = 100
    probe_eval_fraction: float = 0.2  # tail of the video held out for evaluation


@dataclass
class DataConfig:
    data_dir: str = ""
    label_dir: str = ""
    probe_data_dir: str = ""
    probe_label_dir: str = ""
    out_dir: str = ""
    synth_seed: int = 0
    synth_frames: int = 600
    synth_shapes: int = 12
    synth_canvas: int = 128
    synth_classes: int = 3
    synth_color_by_class: bool = False


SECTIONS = {
    "train": TrainConfig,
    "encoder": EncoderConfig,
    "aug": AugConfig,
    "probe": ProbeConfig,
    "data": DataConfig,
}


def _key_owner() -> dict[str, str]:
    owner = {}
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            if f.name in owner:
                raise RuntimeError(f"config key {f.name!r} defined by both {owner[f.name]} and {section}")
            owner[f.name] = section
    return owner


KEY_OWNER = _key_owner()


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def flat(self) -> dict:
        out = {}
        for section in SECTIONS:
            out.update(dataclasses.asdict(getattr(self, section)))
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    def hash(self) -> str:
        payload = {k: v for k, v in self.flat().items() if k not in PATH_KEYS}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **overrides) -> "RunConfig":
        return from_flat({**self.flat(), **overrides})

    def validate(self) -> list[str]:
        problems = list(self.train.validate())
        if self.aug.global_size != self.encoder.image_size:
            problems.append(f"global_size: {self.aug.global_size} must equal image_size {self.encoder.image_size}")
        if self.aug.local_size % self.encoder.patch_size:
            problems.append(f"local_size: {self.aug.local_size} must be a multiple of patch_size {self.encoder.patch_size}")
        if self.probe.probe_iters < 0 or self.probe.probe_batch < 1:
            problems.append("probe_iters/probe_batch: must be >= 0 / >= 1")
        return problems

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        text = f"# config_hash: {self.hash()}\n" + yaml.safe_dump(self.flat(), sort_keys=True)
        path.write_text(text)
        return path


def _coerce(key: str, value, default):
    """Check ``value`` against the type of ``default``; returns the coerced value or raises TypeError."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, tuple):
        if isinstance(value, (list, tuple)) and len(value) == len(default):
            return tuple(_coerce(key, v, d) for v, d in zip(value, default))
    raise TypeError(f"{key}: expected {type(default).__name__}, got {value!r}")


def from_flat(mapping: dict) -> RunConfig:
    problems = []
    per_section: dict[str, dict] = {s: {} for s in SECTIONS}
    defaults = RunConfig()
    for key, value in mapping.items():
        section = KEY_OWNER.get(key)
        if section is None:
            problems.append(f"{key}: unknown key")
            continue
        default = getattr(getattr(defaults, section), key)
        try:
            per_section[section][key] = _coerce(key, value, default)
        except TypeError as exc:
            problems.append(str(exc))
    if problems:
        raise ConfigError(problems)
    try:
        cfg = RunConfig(**{s: cls(**per_section[s]) for s, cls in SECTIONS.items()})
    except ValueError as exc:
        raise ConfigError([str(exc)]) from exc
    problems = cfg.validate()
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path=None, overrides: dict | None = None, preset: str = "default") -> RunConfig:
    mapping = dict(PRESETS[preset])
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError([f"{path}: top level must be a flat mapping"])
        nested = [k for k, v in loaded.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError([f"{k}: nested mappings are not allowed" for k in nested])
        mapping.update(loaded)
    mapping.update(overrides or {})
    return from_flat(mapping)


# Desk-scale presets. ``default`` keeps the imported recipe values; ``toy``
# shortens every schedule so a CPU run finishes in minutes. It also pins the
# teacher temperature at 0.02 and lowers the learning rate: with only 200 steps
# a temperature ramp flattens the targets faster than the student tracks them.
PRESETS: dict[str, dict] = {
    "default": {},
    "toy": {
        "batch_size": 16,
        "epochs": 20,
        "clips_per_epoch": 160,
        "warmup_epochs": 2,
        "teacher_temp_warmup_epochs": 6,
        "base_lr": 1e-3,
        "teacher_temp_start": 0.02,
        "teacher_temp": 0.02,
    },
}
