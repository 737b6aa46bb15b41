"""Soft prompt tuning with an attention-alignment objective."""

from .config import POSITIONS, WEIGHTINGS, TrainConfig, lr_at, warmup_steps
from .losses import VisualPass, alignment_loss, answer_ce, gold_probability, kl_divergence, torch_rollout, visual_pass
from .prompted import SoftPromptedAdapter
from .soft import CONSTRAINED, SoftPromptSet, insert_soft_tokens, insertion_point, shift_layout
from .train import (
    StepLosses,
    TrainResult,
    TrainSample,
    confidence_weight,
    evaluate_alignment,
    framing_pass,
    load_checkpoint,
    train,
    train_step,
)

__all__ = [
    "POSITIONS", "WEIGHTINGS", "TrainConfig", "lr_at", "warmup_steps", "VisualPass", "alignment_loss",
    "answer_ce", "gold_probability", "kl_divergence", "torch_rollout", "visual_pass", "SoftPromptedAdapter",
    "CONSTRAINED", "SoftPromptSet", "insert_soft_tokens", "insertion_point", "shift_layout", "StepLosses",
    "TrainResult", "TrainSample", "confidence_weight", "evaluate_alignment", "framing_pass",
    "load_checkpoint", "train", "train_step",
]
