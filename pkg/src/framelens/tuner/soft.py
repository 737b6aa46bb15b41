"""Soft prompt vectors and their insertion into embedded sequences."""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch

from ..errors import FramingError, StackValueError
from ..layout import Span, TokenLayout
from ..reframe.items import MCQ, OPEN, YESNO
from .config import POSITIONS

CONSTRAINED = (YESNO, MCQ)


@dataclass
class SoftPromptSet:
    """``K`` trainable vectors per constrained framing.

    With ``shared=True`` both framings hold the same tensor object.
    """

    vectors: dict[str, torch.Tensor]
    position: str = "infix"
    shared: bool = False

    def __post_init__(self):
        if set(self.vectors) != set(CONSTRAINED):
            raise FramingError(f"soft prompts need exactly the framings {CONSTRAINED}")
        if self.position not in POSITIONS:
            raise FramingError(f"position must be one of {POSITIONS}")
        shapes = {tuple(v.shape) for v in self.vectors.values()}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise StackValueError(f"prompt vectors must share one (K, d) shape, got {shapes}")
        for v in self.vectors.values():
            if not torch.isfinite(v).all():
                raise StackValueError("prompt vectors must be finite")

    @classmethod
    def initialize(cls, mean: torch.Tensor, K: int, *, std: float = 0.02, seed: int = 0,
                   position: str = "infix", shared: bool = False) -> "SoftPromptSet":
        """Gaussian around ``mean`` (typically the mean input embedding)."""
        g = torch.Generator().manual_seed(seed)
        mean = mean.detach()

        def draw():
            noise = torch.randn(K, mean.shape[-1], generator=g, dtype=mean.dtype)
            return (mean + std * noise).requires_grad_(True)

        if shared:
            v = draw()
            return cls({YESNO: v, MCQ: v}, position, True)
        return cls({YESNO: draw(), MCQ: draw()}, position, False)

    @property
    def K(self) -> int:
        return int(self.vectors[YESNO].shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors[YESNO].shape[1])

    def parameters(self) -> list[torch.Tensor]:
        out: list[torch.Tensor] = []
        for f in CONSTRAINED:
            if not any(self.vectors[f] is p for p in out):
                out.append(self.vectors[f])
        return out

    def for_framing(self, framing: str) -> torch.Tensor:
        if framing not in CONSTRAINED:
            raise FramingError(f"no soft prompts for framing {framing!r}")
        return self.vectors[framing]

    def state(self) -> dict:
        return {
            "position": self.position,
            "shared": self.shared,
            "vectors": {f: v.detach().clone() for f, v in self.vectors.items()},
        }

    @classmethod
    def from_state(cls, state: dict, trainable: bool = True) -> "SoftPromptSet":
        vecs = {f: v.detach().clone().requires_grad_(trainable) for f, v in state["vectors"].items()}
        if state.get("shared"):
            vecs[MCQ] = vecs[YESNO]
        return cls(vecs, state.get("position", "infix"), bool(state.get("shared")))

    def save(self, path) -> None:
        torch.save(self.state(), path)

    @classmethod
    def load(cls, path, trainable: bool = False) -> "SoftPromptSet":
        return cls.from_state(torch.load(path, weights_only=True), trainable)


def insertion_point(layout: TokenLayout, position: str) -> int:
    if position == "prefix":
        return layout.image_span.stop
    if position == "infix":
        return layout.question_span.stop
    if position == "postfix":
        return layout.instruction_span.stop
    raise FramingError(f"unknown position {position!r}")


def _shift(span: Span, at: int, k: int) -> Span:
    return span.shifted(k) if len(span) and span.start >= at else span


def shift_layout(layout: TokenLayout, at: int, k: int) -> TokenLayout:
    """Layout after inserting ``k`` soft tokens at index ``at``."""
    return replace(
        layout,
        image_span=_shift(layout.image_span, at, k),
        question_span=_shift(layout.question_span, at, k),
        instruction_span=_shift(layout.instruction_span, at, k),
        output_span=_shift(layout.output_span, at, k),
        soft_span=Span(at, at + k),
        special=tuple(i + k if i >= at else i for i in layout.special),
    )


def insert_soft_tokens(sequence: torch.Tensor, layout: TokenLayout, prompts: SoftPromptSet | None,
                       framing: str, inject=None) -> tuple[torch.Tensor, TokenLayout]:
    """Insert the framing's vectors at the prompt set's policy boundary.

    Open-ended inputs, a missing prompt set and ``K = 0`` pass through
    unchanged. ``inject(sequence, vectors, position)`` defaults to a plain
    concatenation.
    """
    if framing not in (OPEN, *CONSTRAINED):
        raise FramingError(f"unknown framing {framing!r}")
    if framing == OPEN or prompts is None:
        return sequence, layout
    vecs = prompts.for_framing(framing)
    if prompts.K == 0:
        return sequence, layout
    at = insertion_point(layout, prompts.position)
    vecs = vecs.to(sequence.dtype)
    if inject is None:
        out = torch.cat([sequence[:at], vecs, sequence[at:]], dim=0)
    else:
        out = inject(sequence, vecs, at)
    return out, shift_layout(layout, at, prompts.K)
