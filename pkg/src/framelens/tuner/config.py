"""Training configuration and learning-rate schedule."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Mapping

from ..errors import ConfigError, ScheduleError

POSITIONS = ("prefix", "infix", "postfix")
WEIGHTINGS = ("confidence", "equal")

# fields that locate outputs rather than change the optimisation
_UNHASHED = frozenset({"checkpoint_dir", "log_path"})


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 2e-4
    warmup_frac: float = 0.05
    schedule: str = "cosine"
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    batch: int = 1
    grad_accum: int = 16
    epochs: int = 1
    sample_count: int = 10000
    lambda_attn: float = 5.0
    ce_weight: float = 1.0  # 0 gives the alignment-only ablation
    K: int = 8
    position: str = "infix"
    share_prompts: bool = False
    init_std: float = 0.02
    max_image_side: int = 728
    weighting: str = "confidence"
    kl_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 0  # optimizer steps between held-out evaluations; 0 disables
    early_stopping: bool = False
    patience: int = 3
    max_skip_frac: float = 0.01
    checkpoint_dir: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if not 0 < self.warmup_frac < 1:
            raise ConfigError("warmup_frac must lie in (0, 1)")
        for name in ("lr_peak", "batch", "grad_accum", "epochs", "sample_count", "max_image_side", "kl_eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lambda_attn", "ce_weight", "weight_decay", "init_std", "eval_every", "K"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.schedule != "cosine":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")
        if self.position not in POSITIONS:
            raise ConfigError(f"position must be one of {POSITIONS}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must be two numbers in [0, 1)")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    @property
    def samples_per_step(self) -> int:
        return self.batch * self.grad_accum

    def total_steps(self, n_samples: int) -> int:
        return math.ceil(self.epochs * n_samples / self.samples_per_step)

    def hash(self) -> str:
        d = {k: v for k, v in asdict(self).items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], base: "TrainConfig | None" = None) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training options: {', '.join(sorted(unknown))}")
        values = dict(data)
        if "betas" in values:
            values["betas"] = tuple(values["betas"])
        return replace(base or cls(), **values)


def warmup_steps(total_steps: int, config: TrainConfig) -> int:
    return math.ceil(config.warmup_frac * total_steps)


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr_peak``, then cosine decay to 0 at ``total_steps``."""
    if step < 0 or step > total_steps:
        raise ScheduleError(f"step {step} outside 0..{total_steps}")
    warm = warmup_steps(total_steps, config)
    if step < warm:
        return config.lr_peak * step / warm
    rest = total_steps - warm
    t = 1.0 if rest == 0 else (step - warm) / rest
    return config.lr_peak * 0.5 * (1.0 + math.cos(math.pi * t))
