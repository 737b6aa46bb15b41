"""Run configuration files (YAML or JSON).

Top-level sections, all optional::

    seed: 0
    toy:      {ToyConfig fields}
    train:    {TrainConfig fields}
    reframe:  {ReframeConfig fields}
    steer:    {kind: ve, multipliers: [1, 1.25, 1.5, 2], max_tokens: 8}
    metrics:  {reference_framing: open, sink_z: 3.0}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from ..errors import ConfigError
from ..reframe.items import ReframeConfig
from ..tuner.config import TrainConfig
from .toy import ToyConfig

SECTIONS = ("seed", "toy", "train", "reframe", "steer", "metrics")


@dataclass
class RunConfig:
    seed: int = 0
    toy: ToyConfig = field(default_factory=ToyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    reframe: ReframeConfig = field(default_factory=ReframeConfig)
    steer: dict = field(default_factory=lambda: {"kind": "ve", "multipliers": [1.0, 1.25, 1.5, 2.0], "max_tokens": 8})
    metrics: dict = field(default_factory=lambda: {"reference_framing": "open", "sink_z": 3.0})
    source: str | None = None


def _build(cls, data: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return replace(cls(), **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] section: {exc}") from None


def read_mapping(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a mapping at the top level")
    return data


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    data = read_mapping(path) if path else {}
    for key, value in (overrides or {}).items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
    cfg = RunConfig(source=str(path) if path else None)
    if "seed" in data:
        cfg.seed = int(data["seed"])
    if "toy" in data:
        cfg.toy = _build(ToyConfig, data["toy"], "toy")
    if "train" in data:
        cfg.train = TrainConfig.from_mapping(data["train"])
    if "reframe" in data:
        cfg.reframe = _build(ReframeConfig, data["reframe"], "reframe")
    for name in ("steer", "metrics"):
        if name in data:
            merged = {**getattr(cfg, name), **data[name]}
            unknown = set(merged) - set(getattr(RunConfig(), name))
            if unknown:
                raise ConfigError(f"unknown keys in [{name}]: {', '.join(sorted(unknown))}")
            setattr(cfg, name, merged)
    return cfg
