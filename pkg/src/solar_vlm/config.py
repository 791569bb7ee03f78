"""Experiment configuration files (TOML) with strict key validation."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from .model import AblationFlags, ModelConfig
from .training import TrainConfig

DEFAULT_OUTPUT_ROOT = "runs"
OUTPUT_ENV = "SOLARVLM_OUT"


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class DataConfig:
    path: str = ""
    sites: int = 8
    days: int = 30
    seed: int = 7


@dataclass
class OutputConfig:
    dir: str = ""


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    output: OutputConfig = field(default_factory=OutputConfig)

    def output_root(self) -> Path:
        if self.output.dir:
            return Path(self.output.dir)
        return Path(os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT_ROOT))

    def to_dict(self) -> dict:
        d = {
            "data": asdict(self.data),
            "model": asdict(self.model),
            "training": asdict(self.training),
            "ablation": asdict(self.ablation),
            "output": asdict(self.output),
        }
        d["training"]["split_ratios"] = list(d["training"]["split_ratios"])
        return d

    def dump(self, path) -> None:
        Path(path).write_text(tomli_w.dumps(self.to_dict()))


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "training": TrainConfig,
    "ablation": AblationFlags,
    "output": OutputConfig,
}


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, (tuple, list)):
        return isinstance(value, (list, tuple))
    return True


def from_dict(raw: dict) -> ExperimentConfig:
    """Build a config, collecting every unknown key and type error before raising."""
    problems = []
    built = {}
    for name in raw:
        if name not in SECTIONS:
            problems.append(f"unknown section [{name}]")
    for name, cls in SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            problems.append(f"[{name}] must be a table")
            continue
        defaults = cls()
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in section.items():
            if key not in known:
                problems.append(f"unknown key {name}.{key}")
            elif not _type_ok(getattr(defaults, key), value):
                problems.append(f"bad type for {name}.{key}: expected {type(getattr(defaults, key)).__name__}")
            else:
                if isinstance(getattr(defaults, key), float):
                    value = float(value)
                kwargs[key] = value
        built[name] = kwargs
    if problems:
        raise ConfigError(problems)
    try:
        cfg = ExperimentConfig(**{name: cls(**built[name]) for name, cls in SECTIONS.items()})
    except ValueError as exc:
        raise ConfigError([str(exc)]) from None
    problems.extend(validate(cfg))
    if problems:
        raise ConfigError(problems)
    return cfg


def validate(cfg: ExperimentConfig) -> list:
    m = cfg.model
    out = []
    for key in ("seq_len", "patch_len", "patch_stride", "d_model", "num_heads", "memory_size", "memory_top_k",
                "d_text", "d_v", "num_images", "ffn_mult"):
        if getattr(m, key) < 1:
            out.append(f"model.{key} must be >= 1")
    if m.d_model % 2:
        out.append("model.d_model must be even")
    for key in ("d_model", "d_text", "d_v"):
        if getattr(m, key) % max(m.num_heads, 1):
            out.append(f"model.{key} must be divisible by model.num_heads")
    if m.patch_len > m.seq_len:
        out.append("model.patch_len must not exceed model.seq_len")
    for key in ("text_lambda", "visual_lambda"):
        if not 0.0 <= getattr(m, key) <= 1.0:
            out.append(f"model.{key} must lie in [0, 1]")
    if not 0.0 < m.leaky_slope < 1.0:
        out.append("model.leaky_slope must lie in (0, 1)")
    if m.knn_k < 0:
        out.append("model.knn_k must be >= 0")
    if m.provider not in ("stub", "file"):
        out.append("model.provider must be 'stub' or 'file'")
    if m.provider == "file" and not (m.text_embeddings and m.image_embeddings):
        out.append("model.text_embeddings and model.image_embeddings are required for provider='file'")
    if m.text_gate_input not in ("temp", "aux"):
        out.append("model.text_gate_input must be 'temp' or 'aux'")
    if len(cfg.training.split_ratios) != 3 or abs(sum(cfg.training.split_ratios) - 1.0) > 1e-9:
        out.append("training.split_ratios must be three numbers summing to 1")
    if cfg.data.sites < 2:
        out.append("data.sites must be >= 2")
    if cfg.data.days < 4:
        out.append("data.days must be >= 4")
    return out


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError([f"config file not found: {p}"])
    try:
        raw = tomli.loads(p.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"{p}: {exc}"]) from None
    return from_dict(raw)
