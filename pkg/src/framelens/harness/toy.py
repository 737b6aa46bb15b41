"""Deterministic miniature vision-language model used as a desk-scale fixture.

Four causal transformer layers, two heads, hidden size 16, a 64-word
vocabulary and an 8x8 synthetic image that becomes 64 visual tokens through a
fixed seeded projection. Everything runs in float64 on CPU.

A framing-dependent attention deficit can be planted: every token carries a
scalar "framing score" (the projection of its input embedding on a fixed
direction; constrained-framing words such as *yes*, *no*, *or* and the option
letters score high). For query row ``i`` the running mean ``g_i`` of the scores
of the non-image tokens up to ``i`` lowers the attention logits of all image
keys by ``deficit * g_i`` and raises one sink patch by ``sink_boost * g_i``.
Soft prompt tokens are ordinary input vectors, so they can learn to pull
``g_i`` back down.

The defaults keep attention diffuse (small query/key scale) and image keys
weakly attended (``image_bias``). Rollout visual energy is concave in a
per-layer image-mass multiplier, and only in this low-mass regime is the
response close enough to linear for a ratio multiplier to undo the deficit.
"""

from __future__ import annotations

import hashlib
import math
import re
import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..layout import Span, TokenLayout
from ..rollout import AttentionStack
from .adapter import (
    ALL_CAPS,
    Encoded,
    Forward,
    Generation,
    ModelAdapter,
)

SPECIALS = ["<pad>", "<bos>", "<eos>", "<img>", "<unk>", "<soft>"]
PUNCT = ["?", ".", ",", ":"]
LETTER_TOKENS = ["A", "B", "C", "D"]
FRAMING_WORDS = ["yes", "no", "or", "option", "letter", "choices", "please"]
FUNCTION_WORDS = [
    "answer", "with", "the", "using", "single", "word", "phrase", "question", "is", "are",
    "there", "what", "which", "color", "how", "many", "where", "of", "in", "on", "a", "an",
    "from", "given", "directly", "to", "this",
]
CONTENT_WORDS = [
    "red", "blue", "green", "white", "black", "cat", "dog", "car", "chair", "person",
    "one", "two", "three", "left", "right", "table",
]
VOCAB = SPECIALS + PUNCT + LETTER_TOKENS + FRAMING_WORDS + FUNCTION_WORDS + CONTENT_WORDS
assert len(VOCAB) == 64, len(VOCAB)
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
PAD, BOS, EOS, IMG, UNK, SOFT = range(6)

# framing score of each word: constrained-framing cues high, the rest zero
FRAMING_SCORE = {w: 1.0 for w in FRAMING_WORDS + LETTER_TOKENS}
FRAMING_SCORE.update({"is": 0.5, "are": 0.5, "directly": 0.5})

_WORD = re.compile(r"[A-Za-z]+|[?.,:]")


def tokenize_text(text: str) -> list[int]:
    ids = []
    for tok in _WORD.findall(text):
        if tok in LETTER_TOKENS:
            ids.append(TOKEN_ID[tok])
        else:
            ids.append(TOKEN_ID.get(tok.lower(), UNK))
    return ids


def detokenize(ids) -> str:
    words = [VOCAB[int(i)] for i in ids if int(i) not in (PAD, BOS, EOS, IMG, SOFT)]
    return " ".join(words)


def synthetic_image(image_ref: str, size: int = 8) -> np.ndarray:
    """Pixels in [0, 1] derived deterministically from the image reference."""
    rng = np.random.default_rng(zlib.crc32(image_ref.encode("utf-8")))
    return rng.random((size, size))


@dataclass(frozen=True)
class ToyConfig:
    seed: int = 0
    vocab: int = 64
    d_model: int = 16
    n_heads: int = 2
    n_layers: int = 4
    d_mlp: int = 32
    grid: int = 8
    pixel_size: int = 8  # pixels per patch side; image is grid*pixel_size square
    max_len: int = 256
    deficit: float = 3.0
    sink_boost: float = 1.5
    sink_patch: int = 0
    planted_layers: tuple[int, ...] = (0, 1, 2, 3)
    logit_scale: float = 4.0
    framing_gain: float = 1.0
    image_bias: float = -5.0  # constant logit offset on image keys, all layers
    qk_scale: float = 0.5  # init scale of query/key projections (attention sharpness)


class ToyVLM(torch.nn.Module):
    def __init__(self, cfg: ToyConfig = ToyConfig()):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(cfg.seed)
        d, dt = cfg.d_model, torch.float64

        def randn(*shape, scale=1.0):
            return torch.randn(*shape, generator=g, dtype=dt) * scale

        f = randn(d)
        f = f / f.norm()
        self.register_buffer("framing_dir", f)

        def orth(x):
            return x - (x @ f)[..., None] * f

        emb = orth(randn(cfg.vocab, d, scale=0.7))
        scores = torch.tensor([FRAMING_SCORE.get(w, 0.0) for w in VOCAB], dtype=dt)
        emb = emb + cfg.framing_gain * scores[:, None] * f
        self.tok_emb = torch.nn.Parameter(emb)
        n_img = cfg.grid * cfg.grid
        self.img_dir = torch.nn.Parameter(orth(randn(d, scale=1.0)))
        self.img_pos = torch.nn.Parameter(orth(randn(n_img, d, scale=0.5)))
        pos = torch.arange(cfg.max_len, dtype=dt)[:, None]
        freqs = torch.exp(-math.log(100.0) * torch.arange(0, d, 2, dtype=dt) / d)
        pe = torch.zeros(cfg.max_len, d, dtype=dt)
        pe[:, 0::2] = torch.sin(pos * freqs)
        pe[:, 1::2] = torch.cos(pos * freqs)
        self.register_buffer("pos_emb", 0.3 * pe)

        s = 1.0 / math.sqrt(d)
        self.layers = torch.nn.ModuleList()
        for _ in range(cfg.n_layers):
            layer = torch.nn.ParameterDict(
                {
                    "wq": torch.nn.Parameter(randn(d, d, scale=cfg.qk_scale * s)),
                    "wk": torch.nn.Parameter(randn(d, d, scale=cfg.qk_scale * s)),
                    "wv": torch.nn.Parameter(randn(d, d, scale=s)),
                    "wo": torch.nn.Parameter(randn(d, d, scale=s)),
                    "w1": torch.nn.Parameter(randn(d, cfg.d_mlp, scale=s)),
                    "w2": torch.nn.Parameter(randn(cfg.d_mlp, d, scale=1.0 / math.sqrt(cfg.d_mlp))),
                }
            )
            self.layers.append(layer)
        self.requires_grad_(False)

    # -- embeddings -------------------------------------------------------
    def embed(self, ids: torch.Tensor, pixels: torch.Tensor | None, image_span: Span) -> torch.Tensor:
        x = self.tok_emb[ids]
        if len(image_span):
            if pixels is None:
                raise ValueError("image tokens present but no pixels given")
            vis = pixels.reshape(-1, 1) * self.img_dir + self.img_pos
            x = torch.cat([x[: image_span.start], vis, x[image_span.stop :]], dim=0)
        return x

    def framing_gate(self, x0: torch.Tensor, image_span: Span) -> torch.Tensor:
        """Running mean framing score over non-image tokens, per query row."""
        z = x0 @ self.framing_dir
        text = torch.ones(x0.shape[0], dtype=x0.dtype)
        text[image_span.slice] = 0.0
        num = torch.cumsum(z * text, 0)
        den = torch.cumsum(text, 0).clamp_min(1.0)
        return num / den

    # -- forward ----------------------------------------------------------
    def forward(self, x0: torch.Tensor, image_span: Span, row_transform=None):
        cfg = self.cfg
        n, d = x0.shape
        h_dim = d // cfg.n_heads
        x = x0 + self.pos_emb[:n]
        mask = torch.ones(n, n, dtype=torch.bool).tril()
        gate = self.framing_gate(x0, image_span)
        bias = torch.zeros(n, n, dtype=x0.dtype)
        if len(image_span):
            img = torch.zeros(n, dtype=x0.dtype)
            img[image_span.slice] = 1.0
            sink = torch.zeros(n, dtype=x0.dtype)
            sink[image_span.start + cfg.sink_patch] = 1.0
            bias = gate[:, None] * (-cfg.deficit * img + cfg.sink_boost * sink)[None, :]
            base = cfg.image_bias * img[None, :]
        else:
            base = torch.zeros(n, n, dtype=x0.dtype)
        attns = []
        for li, p in enumerate(self.layers):
            h = F.layer_norm(x, (d,))
            q = (h @ p["wq"]).view(n, cfg.n_heads, h_dim).transpose(0, 1)
            k = (h @ p["wk"]).view(n, cfg.n_heads, h_dim).transpose(0, 1)
            v = (h @ p["wv"]).view(n, cfg.n_heads, h_dim).transpose(0, 1)
            logits = q @ k.transpose(-1, -2) / math.sqrt(h_dim) + base
            if li in cfg.planted_layers:
                logits = logits + bias
            logits = logits.masked_fill(~mask, float("-inf"))
            probs = torch.softmax(logits, dim=-1)
            if row_transform is not None:
                probs = row_transform(probs, li)
            attns.append(probs)
            out = (probs @ v).transpose(0, 1).reshape(n, d)
            x = x + out @ p["wo"]
            h = F.layer_norm(x, (d,))
            x = x + F.gelu(h @ p["w1"], approximate="tanh") @ p["w2"]
        x = F.layer_norm(x, (d,))
        logits = cfg.logit_scale * (x @ self.tok_emb.T) / math.sqrt(d)
        return logits, torch.stack(attns)


class ToyAdapter(ModelAdapter):
    """Adapter over :class:`ToyVLM` exposing every capability."""

    capabilities = ALL_CAPS
    eos_id = EOS

    def __init__(self, config: ToyConfig | None = None, images: dict[str, np.ndarray] | None = None, **overrides):
        cfg = config or ToyConfig()
        if overrides:
            cfg = ToyConfig(**{**cfg.__dict__, **overrides})
        self.config = cfg
        self.model = ToyVLM(cfg)
        self.model.eval()
        self.images = dict(images or {})
        self.model_id = f"toy-vlm(seed={cfg.seed})"
        self.hidden_size = cfg.d_model

    @property
    def image_size(self) -> tuple[int, int]:
        side = self.config.grid * self.config.pixel_size
        return (side, side)

    def pixels_for(self, image_ref: str) -> np.ndarray:
        if image_ref in self.images:
            return np.asarray(self.images[image_ref], dtype=np.float64)
        return synthetic_image(image_ref, self.config.grid)

    # -- tokenisation ------------------------------------------------------
    def token_ids(self, text: str) -> np.ndarray:
        return np.asarray(tokenize_text(text), dtype=np.int64)

    def decode(self, ids) -> str:
        return detokenize(ids)

    def tokenize_with_layout(self, item, answer: str | None = None) -> Encoded:
        cfg = self.config
        n_img = cfg.grid * cfg.grid
        q_ids = tokenize_text(item.rendered_question())
        i_ids = tokenize_text(item.instruction_text)
        a_ids = tokenize_text(answer) if answer is not None else []
        ids = [BOS] + [IMG] * n_img + q_ids + i_ids + a_ids
        img = Span(1, 1 + n_img)
        qs = Span(img.stop, img.stop + len(q_ids))
        ins = Span(qs.stop, qs.stop + len(i_ids))
        out = Span(ins.stop, ins.stop + len(a_ids))
        layout = TokenLayout(
            image_span=img, question_span=qs, instruction_span=ins, output_span=out,
            soft_span=Span(ins.stop, ins.stop), grid=(cfg.grid, cfg.grid),
            image_size=self.image_size, special=(0,),
        )
        return Encoded(
            ids=np.asarray(ids, dtype=np.int64), layout=layout, image=self.pixels_for(item.image_ref),
            text=item.rendered_question() + " " + item.instruction_text, framing=item.framing,
            answer_ids=np.asarray(a_ids, dtype=np.int64), item=item,
        )

    # -- embeddings and differentiable forward -----------------------------
    def embed(self, enc: Encoded) -> torch.Tensor:
        pixels = torch.as_tensor(enc.image, dtype=torch.float64) if enc.image is not None else None
        return self.model.embed(torch.as_tensor(enc.ids), pixels, enc.layout.image_span)

    def mean_embedding(self) -> torch.Tensor:
        return self.model.tok_emb.detach().mean(0)

    def inject_soft(self, sequence: torch.Tensor, vectors: torch.Tensor, position: int) -> torch.Tensor:
        return torch.cat([sequence[:position], vectors.to(sequence.dtype), sequence[position:]], dim=0)

    def forward_embeds(self, embeds: torch.Tensor, layout: TokenLayout, row_transform=None) -> Forward:
        logits, attn = self.model(embeds, layout.image_span, row_transform)
        return Forward(logits, attn)

    # -- capture / generation ----------------------------------------------
    def _run(self, ids: np.ndarray, enc: Encoded, row_transform=None):
        e = Encoded(ids=ids, layout=enc.layout, image=enc.image)
        with torch.no_grad():
            logits, attn = self.model(self.embed(e), enc.layout.image_span, row_transform)
        return logits, attn

    def forward_capture(self, enc: Encoded):
        logits, attn = self._run(enc.ids, enc)
        return logits.numpy(), AttentionStack.from_heads(attn.numpy().astype(np.float64))

    def _generate(self, enc: Encoded, max_tokens: int, row_transform=None) -> Generation:
        ids = enc.ids.copy()
        prompt_len = len(ids)
        for step in range(max_tokens):
            logits, _ = self._run(ids, enc, row_transform)
            last = logits[-1].clone()
            if step == 0:
                last[EOS] = float("-inf")  # at least one output token
            nxt = int(torch.argmax(last))
            if nxt == EOS:
                break
            ids = np.append(ids, nxt)
        logits, attn = self._run(ids, enc, row_transform)
        layout = enc.layout.with_output(Span(prompt_len, len(ids)))
        return Generation(
            text=detokenize(ids[prompt_len:]), ids=ids, layout=layout,
            attention=AttentionStack.from_heads(attn.numpy()), logits=logits.numpy(),
        )

    def generate(self, enc: Encoded, max_tokens: int = 8) -> Generation:
        return self._generate(enc, max_tokens)

    def forward_hooked(self, enc: Encoded, row_transform, max_tokens: int = 8) -> Generation:
        return self._generate(enc, max_tokens, row_transform)

    def score_option(self, enc: Encoded, option_text: str) -> float:
        opt = self.token_ids(option_text)
        if opt.size == 0:
            return float("-inf")
        ids = np.concatenate([enc.ids, opt])
        logits, _ = self._run(ids, enc)
        logp = torch.log_softmax(logits, dim=-1)
        start = len(enc.ids)
        pos = torch.arange(start - 1, start - 1 + len(opt))
        return float(logp[pos, torch.as_tensor(opt)].mean())

    def parameters_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.model.named_parameters()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()


_COLORS = ["red", "blue", "green", "white", "black"]
_OBJECTS = ["cat", "dog", "car", "chair", "person", "table"]
_COUNTS = ["one", "two", "three"]
_SIDES = ["left", "right"]


def toy_triplets(n: int, seed: int = 0, image_side: int = 64):
    """``n`` templated framing triplets over the toy vocabulary.

    Each triplet shares one synthetic image and one fact (colour, count or
    side of an object). Yes/no polarity alternates; MCQ keeps the open
    question wording and adds four options. Every item gets a random bbox.
    """
    from ..reframe.items import MCQ, OPEN, YESNO, FramingTriplet, QAItem

    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        obj = _OBJECTS[rng.integers(len(_OBJECTS))]
        kind = ("color", "count", "side")[i % 3]
        if kind == "color":
            pool, q = _COLORS, f"what color is the {obj} ?"
        elif kind == "count":
            pool, q = _COUNTS, f"how many {obj} are there ?"
        else:
            pool, q = _SIDES + ["table", "chair"], f"where is the {obj} ?"
        answer = pool[rng.integers(2 if kind == "side" else len(pool))]
        affirm = i % 2 == 0
        probe = answer if affirm else next(p for p in pool if p != answer)
        yn_q = {
            "color": f"is the {obj} {probe} ?",
            "count": f"are there {probe} {obj} ?",
            "side": f"is the {obj} on the {probe} ?",
        }[kind]
        options = [answer] + [p for p in pool if p != answer][:3]
        if len(options) < 4:
            options += [c for c in _COLORS if c not in options][: 4 - len(options)]
        options = [options[j] for j in rng.permutation(4)]
        x, y = rng.integers(0, image_side // 2, size=2)
        w, h = rng.integers(image_side // 8, image_side // 2, size=2)
        common = dict(image_ref=f"toy-{seed}-{i}", bbox=(int(x), int(y), int(w), int(h)), category=kind)
        out.append(FramingTriplet(
            QAItem(id=f"t{i}:open", framing=OPEN, question=q, answer=answer, **common),
            QAItem(id=f"t{i}:yesno", framing=YESNO, question=yn_q, answer="yes" if affirm else "no", **common),
            QAItem(id=f"t{i}:mcq", framing=MCQ, question=q, answer=answer, options=options, **common),
            source_id=f"t{i}", provenance="toy template",
        ))
    return out
