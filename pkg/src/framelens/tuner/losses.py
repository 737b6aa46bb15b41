"""Differentiable rollout and the training losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from ..errors import AlignmentShapeError, EmptyGoldError, EmptyQueryError, StackShapeError
from ..layout import TokenLayout


def torch_rollout(attn: torch.Tensor, receptive: torch.Tensor | None = None) -> torch.Tensor:
    """Rollout of ``(L, H, N, N)`` or ``(L, N, N)`` causal attention, same recurrence as the numpy path."""
    if attn.dim() == 4:
        attn = attn.mean(dim=1)
    if attn.dim() != 3 or attn.shape[-1] != attn.shape[-2]:
        raise StackShapeError(f"expected (L, N, N) attention, got {tuple(attn.shape)}")
    n = attn.shape[-1]
    eye = torch.eye(n, dtype=attn.dtype, device=attn.device)
    if receptive is None:
        receptive = torch.arange(1, n + 1, dtype=attn.dtype, device=attn.device)
    R = eye
    for W in attn:
        A = 0.5 * W + 0.5 * eye
        scaled = A * receptive[None, :]
        B = scaled / scaled.sum(dim=-1, keepdim=True)
        R = B @ R
    return R


@dataclass
class VisualPass:
    """Visual energy and normalised visual distribution of one teacher-forced pass."""

    ve: torch.Tensor
    dist: torch.Tensor

    def detach(self) -> "VisualPass":
        return VisualPass(self.ve.detach(), self.dist.detach())


def visual_pass(R: torch.Tensor, layout: TokenLayout) -> VisualPass:
    rows = layout.output_span
    if len(rows) == 0:
        raise EmptyQueryError("no output rows in the layout")
    block = R[rows.start : rows.stop, layout.image_span.start : layout.image_span.stop]
    ve = block.sum(dim=1).mean()
    mass = block.mean(dim=0)
    return VisualPass(ve, mass / mass.sum())


def kl_divergence(p: torch.Tensor, q: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """KL(p || q) after adding ``eps`` to both and renormalising, so the result is >= 0."""
    p = (p + eps) / (p + eps).sum()
    q = (q + eps) / (q + eps).sum()
    return (p * (p.log() - q.log())).sum()


def alignment_loss(open_pass: VisualPass, cons_pass: VisualPass, kl_eps: float = 1e-8) -> torch.Tensor:
    """``(VE_open - VE_cons)^2 + KL(P_open || P_cons)`` with the open pass as a constant target."""
    if open_pass.dist.shape != cons_pass.dist.shape:
        raise AlignmentShapeError(
            f"image token counts differ: {tuple(open_pass.dist.shape)} vs {tuple(cons_pass.dist.shape)}"
        )
    target = open_pass.detach()
    return (target.ve - cons_pass.ve) ** 2 + kl_divergence(target.dist, cons_pass.dist, kl_eps)


def _gold_logits(logits: torch.Tensor, layout: TokenLayout, gold: torch.Tensor) -> torch.Tensor:
    out = layout.output_span
    if len(out) == 0 or gold.numel() == 0:
        raise EmptyGoldError("no gold answer tokens")
    if len(out) != gold.numel():
        raise StackShapeError(f"output span has {len(out)} positions but gold has {gold.numel()} tokens")
    # the token at position t is predicted from position t - 1
    return logits[out.start - 1 : out.stop - 1]


def answer_ce(logits: torch.Tensor, layout: TokenLayout, gold: torch.Tensor) -> torch.Tensor:
    """Mean teacher-forced cross-entropy of the gold answer tokens."""
    return F.cross_entropy(_gold_logits(logits, layout, gold), gold.long())


def gold_probability(logits: torch.Tensor, layout: TokenLayout, gold: torch.Tensor) -> torch.Tensor:
    """Mean model probability of each gold token under teacher forcing."""
    probs = torch.softmax(_gold_logits(logits, layout, gold), dim=-1)
    return probs.gather(1, gold.long()[:, None]).mean()
