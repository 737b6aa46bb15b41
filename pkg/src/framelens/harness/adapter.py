"""Model-adapter contract.

An adapter wraps one model family. Each capability is optional; higher-level
operations call :func:`require` up front so a missing capability fails before
any work is done.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from ..errors import CapabilityError
from ..layout import TokenLayout
from ..rollout import AttentionStack

CAP_TOKENIZE = "tokenize_with_layout"
CAP_CAPTURE = "forward_capture"
CAP_HOOKS = "forward_hooked"
CAP_GENERATE = "generate"
CAP_SCORE = "score_option"
CAP_EMBED = "embed"
CAP_SOFT = "inject_soft"
CAP_TEACHER = "teacher_forcing"
ALL_CAPS = frozenset(
    {CAP_TOKENIZE, CAP_CAPTURE, CAP_HOOKS, CAP_GENERATE, CAP_SCORE, CAP_EMBED, CAP_SOFT, CAP_TEACHER}
)


@dataclass
class Encoded:
    """Tokenised input: ids (image positions hold a placeholder id), layout and pixels."""

    ids: np.ndarray
    layout: TokenLayout
    image: np.ndarray | None = None
    text: str = ""
    framing: str | None = None
    answer_ids: np.ndarray | None = None
    item: Any = None

    @property
    def n_tokens(self) -> int:
        return int(len(self.ids))


@dataclass
class Generation:
    text: str
    ids: np.ndarray
    layout: TokenLayout
    attention: AttentionStack | None = None
    logits: np.ndarray | None = None


@dataclass
class Forward:
    """Differentiable forward output (tensors)."""

    logits: Any
    attention: Any  # (L, H, N, N)


class ModelAdapter:
    """Base class; subclasses set ``capabilities`` and implement those methods.

    Methods:
      tokenize_with_layout(item, answer=None) -> Encoded
      forward_capture(enc) -> (logits, AttentionStack of per-head float64 attention)
      forward_hooked(enc, row_transform, max_tokens) -> Generation (attention of the edited pass)
      generate(enc, max_tokens) -> Generation
      score_option(enc, option_text) -> mean log-likelihood of the option continuation
      embed(enc) -> (N, d) tensor of input embeddings
      inject_soft(sequence, vectors, position) -> sequence with vectors inserted
      forward_embeds(embeds, layout, row_transform=None) -> Forward  (teacher forcing)
      token_ids(text) -> ids of a continuation
    """

    capabilities: frozenset[str] = frozenset()
    model_id: str = "unknown"

    def parameters_hash(self) -> str:
        raise CapabilityError(f"{type(self).__name__} cannot hash its parameters")


def supports(adapter, *caps: str) -> bool:
    have = getattr(adapter, "capabilities", frozenset())
    return all(c in have for c in caps)


def require(adapter, *caps: str) -> None:
    missing = [c for c in caps if not supports(adapter, c)]
    if missing:
        raise CapabilityError(f"{type(adapter).__name__} lacks capabilities: {', '.join(missing)}")


RowTransformFn = Callable[[Any, int], Any]
