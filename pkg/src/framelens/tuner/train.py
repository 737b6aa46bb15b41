"""Soft prompt training with cross-entropy plus attention alignment.

Each sample is a framing triplet. Three teacher-forced passes run per sample:
the open-ended one (no soft tokens, treated as a fixed target) and the yes/no
and MCQ ones with their soft tokens inserted. Only the soft prompt vectors
receive gradients; every model parameter stays frozen.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from ..errors import ConfigError, InsufficientSampleError, NumericalError, TrainingAbortedError
from ..harness.adapter import CAP_EMBED, CAP_SOFT, CAP_TEACHER, CAP_TOKENIZE, require
from ..reframe.items import MCQ, OPEN, YESNO, FramingTriplet, QAItem
from .config import TrainConfig, lr_at
from .losses import VisualPass, alignment_loss, answer_ce, gold_probability, torch_rollout, visual_pass
from .soft import SoftPromptSet, insert_soft_tokens

log = logging.getLogger(__name__)

REQUIRED_CAPS = (CAP_TOKENIZE, CAP_EMBED, CAP_SOFT, CAP_TEACHER)
# below this many processed samples the skip fraction is too noisy to act on
_MIN_SAMPLES_FOR_SKIP_CHECK = 100


def gold_text(item: QAItem) -> str:
    """Target continuation: the option letter for MCQ, the answer otherwise."""
    return item.gold


@dataclass
class TrainSample:
    triplet: FramingTriplet
    w: float | None = None  # confidence weight, filled in before training

    def item(self, framing: str) -> QAItem:
        return self.triplet[framing]


@dataclass
class PassOutput:
    ce: torch.Tensor
    visual: VisualPass
    gold_prob: torch.Tensor


def framing_pass(adapter, item: QAItem, prompts: SoftPromptSet | None) -> PassOutput:
    """Teacher-forced pass over ``item`` and its gold answer, with soft tokens if constrained."""
    enc = adapter.tokenize_with_layout(item, answer=gold_text(item))
    gold = torch.as_tensor(np.asarray(enc.answer_ids, dtype=np.int64))
    seq = adapter.embed(enc)
    seq, layout = insert_soft_tokens(seq, enc.layout, prompts, item.framing, inject=adapter.inject_soft)
    fwd = adapter.forward_embeds(seq, layout)
    R = torch_rollout(fwd.attention)
    return PassOutput(answer_ce(fwd.logits, layout, gold), visual_pass(R, layout),
                      gold_probability(fwd.logits, layout, gold))


def confidence_weight(adapter, open_item: QAItem) -> float:
    """Mean teacher-forced probability of the gold tokens, frozen model, no soft tokens."""
    require(adapter, *REQUIRED_CAPS)
    with torch.no_grad():
        return float(framing_pass(adapter, open_item, None).gold_prob)


@dataclass
class StepLosses:
    total: float
    ce_open: float
    ce_yesno: float
    ce_mcq: float
    align_yesno: float
    align_mcq: float
    w: float

    @property
    def align(self) -> float:
        return self.align_yesno + self.align_mcq

    def to_dict(self) -> dict:
        return {**self.__dict__, "align": self.align}


def train_step(adapter, sample: TrainSample, prompts: SoftPromptSet, config: TrainConfig,
               step: int = 0, scale: float = 1.0, backward: bool = True) -> StepLosses:
    """Loss for one sample; gradients (times ``scale``) accumulate into ``prompts``."""
    if config.weighting == "equal":
        w = 1.0
    else:
        if sample.w is None:
            sample.w = confidence_weight(adapter, sample.item(OPEN))
        w = sample.w
    with torch.no_grad():
        open_out = framing_pass(adapter, sample.item(OPEN), None)
    yn = framing_pass(adapter, sample.item(YESNO), prompts)
    mc = framing_pass(adapter, sample.item(MCQ), prompts)
    a_yn = alignment_loss(open_out.visual, yn.visual, config.kl_eps)
    a_mc = alignment_loss(open_out.visual, mc.visual, config.kl_eps)
    ce = open_out.ce + yn.ce + mc.ce
    total = config.ce_weight * ce + config.lambda_attn * w * (a_yn + a_mc)
    if not torch.isfinite(total):
        raise NumericalError(f"non-finite loss at step {step} for sample {sample.triplet.source_id}")
    if backward and total.requires_grad:
        (total * scale).backward()
    vals = [t.detach().item() for t in (total, open_out.ce, yn.ce, mc.ce, a_yn, a_mc)]
    return StepLosses(*vals, w)


def evaluate_alignment(adapter, samples: Sequence[TrainSample], prompts: SoftPromptSet, config: TrainConfig) -> float:
    """Mean summed alignment loss over ``samples`` (no gradients)."""
    vals = []
    with torch.no_grad():
        for s in samples:
            o = framing_pass(adapter, s.item(OPEN), None).visual
            vals.append(sum(float(alignment_loss(o, framing_pass(adapter, s.item(f), prompts).visual, config.kl_eps))
                            for f in (YESNO, MCQ)))
    return float(np.mean(vals))


@dataclass
class TrainResult:
    prompts: SoftPromptSet
    log: list[dict]
    steps_done: int
    total_steps: int
    stopped_early: bool = False
    skipped: int = 0
    best_eval: float | None = None
    checkpoint: Path | None = None
    finished: bool = True


def _as_samples(dataset) -> list[TrainSample]:
    return [d if isinstance(d, TrainSample) else TrainSample(d) for d in dataset]


def _schedule(n: int, config: TrainConfig) -> list[list[int]]:
    """Sample indices for each optimizer step, fixed by the seed."""
    rng = np.random.default_rng(config.seed)
    order = np.concatenate([rng.permutation(n) for _ in range(config.epochs)])
    k = config.samples_per_step
    return [order[i : i + k].tolist() for i in range(0, len(order), k)]


def save_checkpoint(path: Path, state: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    torch.save(state, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    return torch.load(path, weights_only=True)


def train(
    adapter,
    dataset: Sequence[TrainSample | FramingTriplet],
    config: TrainConfig = TrainConfig(),
    *,
    heldout: Sequence[TrainSample | FramingTriplet] | None = None,
    prompts: SoftPromptSet | None = None,
    resume_from: str | Path | None = None,
    stop_after: int | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train soft prompts; see :class:`TrainConfig` for the knobs.

    ``stop_after`` ends the run after that many optimizer steps (writing a
    checkpoint when ``checkpoint_dir`` is set), which is how an interrupted
    run is simulated. ``resume_from`` continues from such a checkpoint.
    """
    require(adapter, *REQUIRED_CAPS)
    samples = _as_samples(dataset)
    if not samples:
        raise InsufficientSampleError("training set is empty")
    if len(samples) > config.sample_count:
        pick = np.random.default_rng(config.seed).choice(len(samples), config.sample_count, replace=False)
        samples = [samples[i] for i in sorted(pick)]
    held = _as_samples(heldout or [])
    if config.early_stopping and (not held or config.eval_every == 0):
        raise ConfigError("early stopping needs a held-out set and eval_every > 0")

    groups = _schedule(len(samples), config)
    total = len(groups)
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    log_fh = open(config.log_path, "a", encoding="utf-8") if config.log_path else None

    if prompts is None:
        prompts = SoftPromptSet.initialize(adapter.mean_embedding(), config.K, std=config.init_std,
                                           seed=config.seed, position=config.position, shared=config.share_prompts)
    start, skipped, processed, history = 0, 0, 0, []
    best, best_state, bad_evals = math.inf, None, 0
    opt_state = None
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        if ck["config_hash"] != config.hash():
            raise ConfigError("checkpoint was written with a different training config")
        prompts = SoftPromptSet.from_state(ck["prompts"], trainable=True)
        start, skipped, processed = ck["step"], ck["skipped"], ck["processed"]
        history = list(ck["log"])
        best = ck["best"] if ck["best"] is not None else math.inf
        best_state, bad_evals, opt_state = ck["best_prompts"], ck["bad_evals"], ck["optimizer"]

    params = prompts.parameters()
    optimizer = torch.optim.AdamW(params, lr=0.0, betas=config.betas, weight_decay=config.weight_decay)
    if opt_state is not None:
        optimizer.load_state_dict(opt_state)

    if config.weighting == "confidence":
        for s in samples:
            if s.w is None:
                s.w = confidence_weight(adapter, s.item(OPEN))

    def emit(rec: dict) -> None:
        history.append(rec)
        if log_fh:
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()
        if on_step:
            on_step(rec)

    def checkpoint(step: int) -> Path | None:
        if ckpt_dir is None:
            return None
        return save_checkpoint(ckpt_dir / "last.pt", {
            "prompts": prompts.state(), "optimizer": optimizer.state_dict(), "step": step,
            "config_hash": config.hash(), "skipped": skipped, "processed": processed, "log": history,
            "best": None if math.isinf(best) else best, "best_prompts": best_state, "bad_evals": bad_evals,
        })

    stopped_early = False
    last_ckpt = None
    done = start
    try:
        for step in range(start, total):
            lr = lr_at(step, total, config)
            for g in optimizer.param_groups:
                g["lr"] = lr
            optimizer.zero_grad(set_to_none=True)
            group = groups[step]
            losses = []
            for idx in group:
                processed += 1
                try:
                    losses.append(train_step(adapter, samples[idx], prompts, config, step, scale=1.0 / len(group)))
                except NumericalError as exc:
                    skipped += 1
                    log.warning("skipped sample: %s", exc)
            if losses:
                optimizer.step()
            rec = {"step": step + 1, "lr": lr, "skipped": skipped}
            if losses:
                for key in ("total", "ce_open", "ce_yesno", "ce_mcq", "align_yesno", "align_mcq", "align", "w"):
                    rec[key] = float(np.mean([l.to_dict()[key] for l in losses]))
            emit(rec)
            done = step + 1
            if processed >= _MIN_SAMPLES_FOR_SKIP_CHECK and skipped / processed > config.max_skip_frac:
                raise TrainingAbortedError(f"{skipped} of {processed} samples skipped")

            if config.eval_every and held and (step + 1) % config.eval_every == 0:
                val = evaluate_alignment(adapter, held, prompts, config)
                emit({"step": step + 1, "eval_align": val})
                if val < best:
                    best, best_state, bad_evals = val, prompts.state(), 0
                else:
                    bad_evals += 1
                last_ckpt = checkpoint(step + 1)
                if config.early_stopping and bad_evals >= config.patience:
                    stopped_early = True
                    break
            if stop_after is not None and done >= stop_after and done < total:
                last_ckpt = checkpoint(done)
                return TrainResult(prompts, history, done, total, False, skipped,
                                   None if math.isinf(best) else best, last_ckpt, finished=False)
        if skipped and skipped / processed > config.max_skip_frac:
            raise TrainingAbortedError(f"{skipped} of {processed} samples skipped")
        last_ckpt = checkpoint(done) or last_ckpt
    finally:
        if log_fh:
            log_fh.close()

    if stopped_early and best_state is not None:
        prompts = SoftPromptSet.from_state(best_state, trainable=False)
    return TrainResult(prompts, history, done, total, stopped_early, skipped,
                       None if math.isinf(best) else best, last_ckpt)
