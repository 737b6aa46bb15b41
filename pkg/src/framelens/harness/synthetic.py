"""Synthetic attention stacks with plantable framing-dependent shifts."""

from __future__ import annotations

import numpy as np

from ..layout import BoxRegion, Span, TokenLayout
from ..rollout import AttentionStack, causal_mask
from ..steering import apply_ve_row


def synthetic_layout(grid: tuple[int, int] = (4, 4), n_question: int = 5, n_instruction: int = 3,
                     n_output: int = 2, bos: bool = True) -> TokenLayout:
    """Layout ``[BOS] image question instruction output`` with a square-pixel image."""
    start = 1 if bos else 0
    n_img = grid[0] * grid[1]
    img = Span(start, start + n_img)
    q = Span(img.stop, img.stop + n_question)
    ins = Span(q.stop, q.stop + n_instruction)
    out = Span(ins.stop, ins.stop + n_output)
    return TokenLayout(img, q, ins, out, grid=grid, image_size=(grid[1] * 14, grid[0] * 14),
                       special=(0,) if bos else ())


def random_causal_rows(n: int, rng: np.random.Generator, concentration: float = 1.0) -> np.ndarray:
    """One row-stochastic causal matrix with Dirichlet rows over the visible keys."""
    W = np.zeros((n, n))
    for i in range(n):
        W[i, : i + 1] = rng.dirichlet(np.full(i + 1, concentration))
    return W


def random_stack(n: int, n_layers: int, rng: np.random.Generator, n_heads: int | None = None,
                 concentration: float = 1.0) -> AttentionStack:
    """Random causal stack; per-head when ``n_heads`` is given."""
    if n_heads is None:
        layers = np.stack([random_causal_rows(n, rng, concentration) for _ in range(n_layers)])
        return AttentionStack(layers, causal_mask(n))
    layers = np.stack([
        np.stack([random_causal_rows(n, rng, concentration) for _ in range(n_heads)]) for _ in range(n_layers)
    ])
    return AttentionStack(layers, causal_mask(n), heads_reduced=False)


def plant_visual_deficit(stack: AttentionStack, layout: TokenLayout, factor: float) -> AttentionStack:
    """Scale image mass of every text row by ``factor`` (< 1 plants a deficit), renormalising the rest.

    This is the VE row edit with multiplier ``factor``; as long as no row
    clamps, steering by ``1 / factor`` undoes it exactly.
    """
    layers = stack.layers.copy()
    flat = layers.reshape(-1, stack.N, stack.N)
    for W in flat:
        for i in range(layout.image_span.stop, stack.N):
            W[i] = apply_ve_row(W[i], layout, factor)
    return AttentionStack(layers, stack.causal_mask, stack.heads_reduced)


def plant_sink(stack: AttentionStack, layout: TokenLayout, patch: int, share: float) -> AttentionStack:
    """Move ``share`` of each text row's image mass onto one patch, keeping the row's image total."""
    if not 0 <= share <= 1:
        raise ValueError("share must lie in [0, 1]")
    layers = stack.layers.copy()
    flat = layers.reshape(-1, stack.N, stack.N)
    img = layout.image_span
    for W in flat:
        rows = W[img.stop :, img.slice]
        total = rows.sum(axis=1, keepdims=True)
        rows *= 1.0 - share
        rows[:, patch] += share * total[:, 0]
        W[img.stop :, img.slice] = rows
    return AttentionStack(layers, stack.causal_mask, stack.heads_reduced)


def framing_pair(layout: TokenLayout, n_layers: int, rng: np.random.Generator, factor: float = 0.6,
                 sink: tuple[int, float] | None = None, n_heads: int | None = None,
                 concentration: float = 1.0) -> tuple[AttentionStack, AttentionStack]:
    """An (open, constrained) pair: the constrained stack is the open one with a planted deficit."""
    open_stack = random_stack(layout.end(), n_layers, rng, n_heads, concentration)
    cons = plant_visual_deficit(open_stack, layout, factor)
    if sink is not None:
        cons = plant_sink(cons, layout, *sink)
    return open_stack, cons


def full_image_region(layout: TokenLayout) -> BoxRegion:
    w, h = layout.image_size
    return BoxRegion((0.0, 0.0, float(w), float(h)), frozenset(range(layout.n_image)))
