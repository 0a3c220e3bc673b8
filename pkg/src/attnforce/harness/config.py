"""Experiment configuration as flat ``key=value`` files."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..models import HeadSelection, ModelConfig
from ..training import TrainingModeConfig


@dataclass
class OptimConfig:
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 1.0
    batch_size: int = 50  # sentences per batch (rnn)
    batch_tokens: int = 400  # target-token budget per batch (transformer)
    label_smoothing: float = 0.0  # applied to transformer losses only
    schedule: str = "constant"  # constant | inverse-sqrt-warmup
    warmup: int = 4000


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    mode: TrainingModeConfig = field(default_factory=TrainingModeConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    max_epochs: int = 30
    patience: int = 10
    seed: int = 0
    repeats: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        if self.patience < 1 or self.repeats < 1 or self.max_epochs < 1:
            raise ValueError("patience, repeats and max_epochs must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def finetune(self) -> bool:
        return self.mode.mode != "TF"


_SECTIONS = {"model": ModelConfig, "mode": TrainingModeConfig, "optim": OptimConfig}


def _convert(type_name: str, value: str):
    value = value.strip()
    optional = "None" in type_name
    if optional and value.lower() in ("", "none"):
        return None
    base = type_name.replace("| None", "").strip()
    if base == "int":
        return int(value)
    if base == "float":
        return math.inf if value.lower() in ("inf", "+inf") else float(value)
    if base == "HeadSelection":
        return HeadSelection.parse(value)
    return value


def _format(value) -> str:
    if isinstance(value, HeadSelection):
        return value.format()
    if value is None:
        return ""
    return str(value)


def config_keys() -> dict[str, tuple[str | None, str]]:
    """flat key -> (section or None for top level, type name)."""
    keys: dict[str, tuple[str | None, str]] = {}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            if f.name in keys:
                raise RuntimeError(f"duplicate config key {f.name}")
            keys[f.name] = (section, str(f.type))
    for f in fields(ExperimentConfig):
        if f.name not in _SECTIONS:
            keys[f.name] = (None, str(f.type))
    return keys


def apply_overrides(cfg: ExperimentConfig, items: dict[str, str]) -> ExperimentConfig:
    keys = config_keys()
    updates: dict[str | None, dict] = {}
    for key, raw in items.items():
        key = key.replace("-", "_")
        if key not in keys:
            raise ValueError(f"unknown config key {key!r}")
        section, type_name = keys[key]
        updates.setdefault(section, {})[key] = _convert(type_name, raw)
    kw = dict(updates.get(None, {}))
    for section in _SECTIONS:
        if section in updates:
            kw[section] = replace(getattr(cfg, section), **updates[section])
    return replace(cfg, **kw)


def parse_config_lines(lines) -> dict[str, str]:
    items = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key=value")
        key, value = line.split("=", 1)
        items[key.strip()] = value.strip()
    return items


def load_config(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    items = parse_config_lines(Path(path).read_text(encoding="utf-8").splitlines())
    return apply_overrides(base or ExperimentConfig(), items)


def config_lines(cfg: ExperimentConfig) -> list[str]:
    out = []
    for key, (section, _) in config_keys().items():
        holder = cfg if section is None else getattr(cfg, section)
        out.append(f"{key}={_format(getattr(holder, key))}")
    return out


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text("\n".join(config_lines(cfg)) + "\n", encoding="utf-8")


def rnn_defaults(**overrides) -> ExperimentConfig:
    """Desk-scale RNN setup: Adam 0.002, clip 1, batch 50, dropout 0.2, gamma 10."""
    cfg = ExperimentConfig(
        model=ModelConfig.rnn(24, 24, dropout=0.2),
        mode=TrainingModeConfig(gamma=10.0),
        optim=OptimConfig(),
    )
    return apply_overrides(cfg, {k: str(v) for k, v in overrides.items()})


def transformer_defaults(**overrides) -> ExperimentConfig:
    """Desk-scale Transformer setup: inverse-sqrt warmup, betas (0.9, 0.98), smoothing 0.1, gamma 1000."""
    cfg = ExperimentConfig(
        model=ModelConfig.transformer(24, 24, dropout=0.1),
        mode=TrainingModeConfig(gamma=1000.0, K=2, forced_heads=HeadSelection.parse("1-2:1-8")),
        optim=OptimConfig(lr=5e-4, beta2=0.98, label_smoothing=0.1, schedule="inverse-sqrt-warmup", warmup=4000),
    )
    return apply_overrides(cfg, {k: str(v) for k, v in overrides.items()})
