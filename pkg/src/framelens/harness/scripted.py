"""Scripted adapter: canned answers and option scores, no model."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from ..layout import Span, TokenLayout
from .adapter import CAP_GENERATE, CAP_SCORE, CAP_TOKENIZE, Encoded, Generation, ModelAdapter

_LAYOUT = TokenLayout(Span(1, 2), Span(2, 3), Span(3, 4), grid=(1, 1), image_size=(1, 1), special=(0,))


class ScriptedAdapter(ModelAdapter):
    """Answers looked up by item id.

    ``answers`` maps item id to the generated text. ``scores`` maps item id to
    either a list aligned with the item's options or a mapping from option
    text to score. Unknown ids produce ``default``.
    """

    capabilities = frozenset({CAP_TOKENIZE, CAP_GENERATE, CAP_SCORE})
    model_id = "scripted"

    def __init__(self, answers: Mapping[str, str] | None = None,
                 scores: Mapping[str, Sequence[float] | Mapping[str, float]] | None = None,
                 default: str = ""):
        self.answers = dict(answers or {})
        self.scores = dict(scores or {})
        self.default = default
        self.calls: list[str] = []

    def tokenize_with_layout(self, item, answer: str | None = None) -> Encoded:
        return Encoded(ids=np.zeros(4, dtype=np.int64), layout=_LAYOUT, text=item.rendered_question(),
                       framing=item.framing, item=item)

    def generate(self, enc: Encoded, max_tokens: int = 8) -> Generation:
        item = enc.item
        self.calls.append(item.id)
        text = self.answers.get(item.id, self.default)
        ids = np.concatenate([enc.ids, np.ones(1, dtype=np.int64)])
        return Generation(text=text, ids=ids, layout=_LAYOUT.with_output(Span(4, 5)))

    def score_option(self, enc: Encoded, option_text: str) -> float:
        item = enc.item
        table = self.scores.get(item.id)
        if table is None:
            return 0.0
        if isinstance(table, Mapping):
            return float(table.get(option_text, float("-inf")))
        return float(table[list(item.options).index(option_text)])

    def parameters_hash(self) -> str:
        return "scripted"
