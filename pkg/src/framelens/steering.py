"""Inference-time attention steering.

Two multiplicative edits of post-softmax attention rows, applied to every head
and layer for query rows after the image:

* VE steering scales all image weights by ``m`` and shrinks the non-image
  weights so the row still sums to 1. Within-image proportions are kept.
* Box steering scales in-box image weights by ``m`` and shrinks out-of-box
  image weights so the total image mass is unchanged. Non-image weights are
  untouched.

Multipliers that would push mass past the available budget are clamped so a
``clamp_eps`` sliver is always left behind.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .errors import CapabilityError, InsufficientSampleError, ZeroVisualMassError
from .layout import BoxRegion, TokenLayout, map_bbox_to_patches
from .metrics import VisualStats, compute_stats
from .rollout import rollout


class SteeringWarning(UserWarning):
    """A row could not be edited (no mass to transfer from)."""


@dataclass
class SteeringSpec:
    kind: str
    multiplier: float
    layout: TokenLayout | None = None
    box: BoxRegion | None = None
    clamp_eps: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("ve", "box"):
            raise ValueError(f"unknown steering kind {self.kind!r}")
        if not self.multiplier > 0:
            raise ValueError("multiplier must be positive")
        if self.kind == "box" and self.box is None:
            raise ValueError("box steering needs a BoxRegion")
        if not self.clamp_eps > 0:
            raise ValueError("clamp_eps must be positive")


def compute_multiplier(open_stats: VisualStats, cons_stats: VisualStats, kind: str) -> float:
    attr = {"ve": "visual_energy", "box": "box_attention"}[kind]
    num, den = getattr(open_stats, attr), getattr(cons_stats, attr)
    if num is None or den is None:
        raise ValueError(f"{attr} missing from stats")
    if den <= 0:
        raise ZeroVisualMassError(f"constrained {attr} is zero")
    return float(num) / float(den)


def _effective(m: float, cap: float) -> float:
    if m <= 1.0:
        return m
    return min(m, max(cap, 1.0))


def apply_ve_row(row, layout: TokenLayout, m: float, clamp_eps: float = 1e-4) -> np.ndarray:
    row = np.asarray(row, dtype=np.float64)
    if m == 1.0:
        return row
    img = layout.image_span.slice
    s = row[img].sum()
    if s >= 1.0:
        warnings.warn("row has no non-image mass; left unchanged", SteeringWarning, stacklevel=2)
        return row
    m_eff = _effective(m, (1.0 - clamp_eps) / s) if s > 0 else m
    out = row * ((1.0 - m_eff * s) / (1.0 - s))
    out[img] = row[img] * m_eff
    return out


def apply_box_row(row, layout: TokenLayout, box: BoxRegion, m: float, clamp_eps: float = 1e-4) -> np.ndarray:
    row = np.asarray(row, dtype=np.float64)
    if m == 1.0:
        return row
    start = layout.image_span.start
    inside = np.zeros(layout.n_image, dtype=bool)
    inside[sorted(box.patch_indices)] = True
    in_idx = start + np.nonzero(inside)[0]
    out_idx = start + np.nonzero(~inside)[0]
    b, o = row[in_idx].sum(), row[out_idx].sum()
    if o <= 0:
        warnings.warn("no out-of-box image mass; left unchanged", SteeringWarning, stacklevel=2)
        return row
    s = b + o
    m_eff = _effective(m, (s - clamp_eps) / b) if b > 0 else m
    out = row.copy()
    out[in_idx] = row[in_idx] * m_eff
    out[out_idx] = row[out_idx] * ((s - m_eff * b) / o)
    return out


def _in_box_mask(layout: TokenLayout, box: BoxRegion, n: int, device=None) -> torch.Tensor:
    mask = torch.zeros(n, dtype=torch.bool, device=device)
    idx = torch.tensor(sorted(box.patch_indices), dtype=torch.long, device=device) + layout.image_span.start
    mask[idx] = True
    return mask


def ve_rows(rows: torch.Tensor, img: torch.Tensor, m: float, clamp_eps: float) -> torch.Tensor:
    """Vectorised VE edit over the last axis; ``img`` is a boolean key mask."""
    s = (rows * img).sum(-1, keepdim=True)
    has_rest = s < 1.0
    cap = (1.0 - clamp_eps) / s.clamp_min(1e-300)
    if m > 1.0:
        m_eff = torch.minimum(torch.full_like(s, m), cap.clamp_min(1.0))
    else:
        m_eff = torch.full_like(s, m)
    rest_scale = (1.0 - m_eff * s) / (1.0 - s).clamp_min(1e-300)
    edited = torch.where(img, rows * m_eff, rows * rest_scale)
    return torch.where(has_rest, edited, rows)


def box_rows(rows: torch.Tensor, inbox: torch.Tensor, img: torch.Tensor, m: float, clamp_eps: float) -> torch.Tensor:
    outbox = img & ~inbox
    b = (rows * inbox).sum(-1, keepdim=True)
    o = (rows * outbox).sum(-1, keepdim=True)
    s = b + o
    cap = (s - clamp_eps) / b.clamp_min(1e-300)
    if m > 1.0:
        m_eff = torch.where(b > 0, torch.minimum(torch.full_like(b, m), cap.clamp_min(1.0)), torch.full_like(b, m))
    else:
        m_eff = torch.full_like(b, m)
    out_scale = (s - m_eff * b) / o.clamp_min(1e-300)
    edited = torch.where(inbox, rows * m_eff, torch.where(outbox, rows * out_scale, rows))
    return torch.where(o > 0, edited, rows)


RowTransform = Callable[[torch.Tensor, int], torch.Tensor]


def make_row_transform(spec: SteeringSpec, layout: TokenLayout) -> RowTransform:
    """Hook callable editing ``(..., N, N)`` post-softmax attention in place of the original.

    Rows at or after the end of the image span are edited; earlier rows pass
    through. ``m == 1`` returns the input object itself.
    """
    m = float(spec.multiplier)
    first_row = layout.image_span.stop

    def transform(attn: torch.Tensor, layer: int) -> torch.Tensor:
        if m == 1.0:
            return attn
        n = attn.shape[-1]
        img = torch.zeros(n, dtype=torch.bool, device=attn.device)
        img[layout.image_span.slice] = True
        tail = attn[..., first_row:, :]
        if spec.kind == "ve":
            edited = ve_rows(tail, img, m, spec.clamp_eps)
        else:
            edited = box_rows(tail, _in_box_mask(layout, spec.box, n, attn.device), img, m, spec.clamp_eps)
        return torch.cat([attn[..., :first_row, :], edited], dim=-2)

    return transform


@dataclass
class SteeredOutput:
    prediction: str
    stats: VisualStats
    layout: TokenLayout
    multiplier: float


def _region_for(item, layout: TokenLayout) -> BoxRegion | None:
    if getattr(item, "bbox", None) is None:
        return None
    from .layout import union_regions

    boxes = item.bbox if isinstance(item.bbox[0], (list, tuple)) else [item.bbox]
    return union_regions(map_bbox_to_patches(b, layout) for b in boxes)


def measure(adapter, item, spec: SteeringSpec | None = None, max_tokens: int = 8) -> SteeredOutput:
    """Generate for ``item`` (optionally steered) and compute rollout stats on that pass."""
    from .harness.adapter import CAP_HOOKS, require

    require(adapter, CAP_HOOKS)
    enc = adapter.tokenize_with_layout(item)
    region = _region_for(item, enc.layout)
    if spec is None:
        spec = SteeringSpec("ve", 1.0)
    elif spec.kind == "box" and spec.box is None and region is not None:
        spec = SteeringSpec("box", spec.multiplier, enc.layout, region, spec.clamp_eps)
    gen = adapter.forward_hooked(enc, make_row_transform(spec, enc.layout), max_tokens=max_tokens)
    layout = gen.layout
    if len(layout.output_span) == 0:
        raise ZeroVisualMassError("generation produced no output tokens to use as queries")
    result = rollout(gen.attention.reduced(), layout=layout)
    # box steering is measured on the box being steered
    stats = compute_stats(result, layout, region=spec.box if spec.kind == "box" else region)
    return SteeredOutput(gen.text, stats, layout, spec.multiplier)


def steered_generate(adapter, item, spec: SteeringSpec, max_tokens: int = 8) -> tuple[str, VisualStats]:
    from .harness.adapter import CAP_HOOKS, supports

    if not supports(adapter, CAP_HOOKS):
        raise CapabilityError(f"{type(adapter).__name__} cannot edit attention")
    out = measure(adapter, item, spec, max_tokens=max_tokens)
    return out.prediction, out.stats


def per_sample_multiplier(adapter, open_item, cons_item, kind: str, max_tokens: int = 8) -> float:
    """Ratio of the open-ended statistic to the constrained one, from unsteered passes."""
    o = measure(adapter, open_item, max_tokens=max_tokens).stats
    c = measure(adapter, cons_item, max_tokens=max_tokens).stats
    return compute_multiplier(o, c, kind)


@dataclass
class RankCorrelation:
    rho: float
    tie: bool = False


def spearman(x: Sequence[float], y: Sequence[float]) -> RankCorrelation:
    """Spearman's rho with average ranks for ties; a constant series gives 0 with ``tie``."""
    if len(x) != len(y):
        raise ValueError("series lengths differ")
    if len(x) < 3:
        raise InsufficientSampleError("rank correlation needs at least 3 points")
    rx, ry = rankdata(x), rankdata(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    denom = np.sqrt((dx**2).sum() * (dy**2).sum())
    if denom == 0:
        return RankCorrelation(0.0, tie=True)
    return RankCorrelation(float((dx * dy).sum() / denom))


@dataclass
class SweepResult:
    kind: str
    multipliers: list[float]
    accuracy: list[float]
    visual_energy: list[float]
    box_attention: list[float | None]
    accuracy_rho: RankCorrelation | None = None
    ve_rho: RankCorrelation | None = None
    records: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        for k in ("accuracy_rho", "ve_rho"):
            v = out[k]
            out[k] = None if v is None else {"rho": v.rho, "tie": v.tie}
        return out


def multiplier_sweep(adapter, dataset, kind: str, multipliers: Sequence[float], max_tokens: int = 8) -> SweepResult:
    """Accuracy and measured VE as a function of the steering multiplier."""
    from .consistency import match_answer

    if len(multipliers) < 3:
        raise InsufficientSampleError("a sweep needs at least 3 multipliers")
    acc, ves, boxes, records = [], [], [], []
    for m in multipliers:
        hits, ve_vals, box_vals = 0, [], []
        for item in dataset:
            spec = SteeringSpec(kind, m) if kind == "ve" else SteeringSpec("box", m, box=_placeholder_box(adapter, item))
            out = measure(adapter, item, spec, max_tokens=max_tokens)
            ok, _ = match_answer(out.prediction, item.gold, item.framing, options=item.options)
            hits += ok
            ve_vals.append(out.stats.visual_energy)
            if out.stats.box_attention is not None:
                box_vals.append(out.stats.box_attention)
            records.append({"item_id": item.id, "multiplier": m, "prediction": out.prediction,
                            "matched": bool(ok), **out.stats.to_dict()})
        acc.append(hits / max(len(dataset), 1))
        ves.append(float(np.mean(ve_vals)) if ve_vals else float("nan"))
        boxes.append(float(np.mean(box_vals)) if box_vals else None)
    return SweepResult(kind, list(map(float, multipliers)), acc, ves, boxes,
                       spearman(multipliers, acc), spearman(multipliers, ves), records)


def _placeholder_box(adapter, item) -> BoxRegion:
    enc = adapter.tokenize_with_layout(item)
    region = _region_for(item, enc.layout)
    if region is None:
        raise ValueError(f"item {item.id} has no bbox for box steering")
    return region



@dataclass
class Recovery:
    """The steered statistic before and after ratio steering, next to its open-ended value."""

    item_id: str
    statistic: str
    multiplier: float
    open_value: float
    constrained_value: float
    steered_value: float

    @property
    def relative_error(self) -> float:
        return abs(self.steered_value - self.open_value) / self.open_value

    def to_dict(self) -> dict:
        return {**self.__dict__, "relative_error": self.relative_error}


def ratio_recovery(adapter, open_item, cons_item, kind: str = "ve", max_tokens: int = 8) -> Recovery:
    """Steer ``cons_item`` with its per-sample ratio multiplier and measure the result."""
    attr = {"ve": "visual_energy", "box": "box_attention"}[kind]
    o = measure(adapter, open_item, max_tokens=max_tokens).stats
    c = measure(adapter, cons_item, max_tokens=max_tokens).stats
    m = compute_multiplier(o, c, kind)
    spec = SteeringSpec(kind, m) if kind == "ve" else SteeringSpec("box", m, box=_placeholder_box(adapter, cons_item))
    s = measure(adapter, cons_item, spec, max_tokens=max_tokens).stats
    return Recovery(cons_item.id, attr, m, getattr(o, attr), getattr(c, attr), getattr(s, attr))
