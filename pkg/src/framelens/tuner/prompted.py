"""Inference with trained soft prompts inserted into constrained-framing inputs."""

from __future__ import annotations

import numpy as np
import torch

from ..harness.adapter import (
    CAP_CAPTURE,
    CAP_EMBED,
    CAP_GENERATE,
    CAP_HOOKS,
    CAP_SCORE,
    CAP_SOFT,
    CAP_TEACHER,
    CAP_TOKENIZE,
    Encoded,
    Generation,
    ModelAdapter,
    require,
)
from ..layout import Span
from ..rollout import AttentionStack
from .soft import SoftPromptSet, insert_soft_tokens


class SoftPromptedAdapter(ModelAdapter):
    """Wraps an embedding-capable adapter; generation and scoring see the soft tokens.

    Layouts returned from :meth:`generate` include the inserted ``soft_span``,
    so rollout statistics of prompted runs line up with the attention shapes.
    """

    capabilities = frozenset({CAP_TOKENIZE, CAP_GENERATE, CAP_SCORE, CAP_CAPTURE, CAP_HOOKS})

    def __init__(self, base, prompts: SoftPromptSet):
        require(base, CAP_TOKENIZE, CAP_EMBED, CAP_SOFT, CAP_TEACHER)
        self.base = base
        self.prompts = prompts
        self.model_id = f"{getattr(base, 'model_id', 'model')}+soft(K={prompts.K})"

    def tokenize_with_layout(self, item, answer: str | None = None) -> Encoded:
        return self.base.tokenize_with_layout(item, answer=answer)

    def token_ids(self, text: str) -> np.ndarray:
        return self.base.token_ids(text)

    def parameters_hash(self) -> str:
        return self.base.parameters_hash()

    def _forward(self, ids: np.ndarray, enc: Encoded, row_transform=None):
        e = Encoded(ids=ids, layout=enc.layout, image=enc.image, framing=enc.framing)
        with torch.no_grad():
            seq = self.base.embed(e)
            seq, layout = insert_soft_tokens(seq, enc.layout, self.prompts, enc.framing or "open",
                                             inject=self.base.inject_soft)
            fwd = self.base.forward_embeds(seq, layout, row_transform)
        return fwd.logits, fwd.attention, layout

    def forward_capture(self, enc: Encoded):
        logits, attn, _ = self._forward(enc.ids, enc)
        return logits.numpy(), AttentionStack.from_heads(attn.numpy().astype(np.float64))

    def _generate(self, enc: Encoded, max_tokens: int, row_transform=None) -> Generation:
        ids = enc.ids.copy()
        prompt_len = len(ids)
        eos = getattr(self.base, "eos_id", None)
        for step in range(max_tokens):
            logits, _, _ = self._forward(ids, enc, row_transform)
            last = logits[-1].clone()
            if step == 0 and eos is not None:
                last[eos] = float("-inf")
            nxt = int(torch.argmax(last))
            if eos is not None and nxt == eos:
                break
            ids = np.append(ids, nxt)
        logits, attn, layout = self._forward(ids, enc, row_transform)
        k = len(layout.soft_span)
        layout = layout.with_output(Span(prompt_len + k, len(ids) + k))
        text = self.base.decode(ids[prompt_len:]) if hasattr(self.base, "decode") else ""
        return Generation(text=text, ids=ids, layout=layout,
                          attention=AttentionStack.from_heads(attn.numpy()), logits=logits.numpy())

    def generate(self, enc: Encoded, max_tokens: int = 8) -> Generation:
        return self._generate(enc, max_tokens)

    def forward_hooked(self, enc: Encoded, row_transform, max_tokens: int = 8) -> Generation:
        return self._generate(enc, max_tokens, row_transform)

    def score_option(self, enc: Encoded, option_text: str) -> float:
        opt = self.token_ids(option_text)
        if opt.size == 0:
            return float("-inf")
        logits, _, _ = self._forward(np.concatenate([enc.ids, opt]), enc)
        logp = torch.log_softmax(logits, dim=-1)
        # option tokens are the last len(opt) positions after insertion
        n = logp.shape[0]
        pos = torch.arange(n - len(opt) - 1, n - 1)
        return float(logp[pos, torch.as_tensor(opt)].mean())
